//! Joint-embedding predictive pretraining on raw audio waveforms.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod jepa;
pub mod nat;
pub mod optim;
pub mod param;
pub mod sampler;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod wave_encoder;

pub use error::{Error, Result};
