use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("input of {len} samples is shorter than the receptive field of {receptive_field}")]
    TooShort { len: usize, receptive_field: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("block sampling failed: {0}")]
    Sampling(String),
    #[error("empty context: the context encoder needs at least one visible frame")]
    EmptyContext,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("silent noise field: cannot mix at a finite SNR")]
    SilentNoise,
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("score table error: {0}")]
    ScoreTable(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("{0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
