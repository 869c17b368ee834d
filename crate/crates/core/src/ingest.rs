//! Audio ingestion: WAV decoding, resampling with mean centering, and
//! multi-crop batching with per-instance normalization.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Raw audio, one sample vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SoundClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl SoundClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::InvalidAudio(format!("expected 1 or 2 channels, got {}", channels.len())));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidAudio("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Copies a mono clip onto two identical channels; stereo clips pass through.
    pub fn duplicated_to_stereo(&self) -> SoundClip {
        if self.channels.len() == 2 {
            return self.clone();
        }
        SoundClip { channels: vec![self.channels[0].clone(), self.channels[0].clone()], sample_rate: self.sample_rate }
    }
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // The file already opened, so read failures mean a malformed stream.
        hound::Error::IoError(io) => Error::Decode { path: path.into(), reason: io.to_string() },
        hound::Error::Unsupported => {
            Error::UnsupportedFormat { path: path.into(), reason: "encoding not supported by the decoder".into() }
        }
        other => Error::Decode { path: path.into(), reason: other.to_string() },
    }
}

/// Decodes a 16-bit integer or 32-bit float PCM WAV file.
///
/// Integer samples are scaled by `1/32768`, so full-scale positive 32767 maps
/// to `0.999969...`.
pub fn load_clip(path: impl AsRef<Path>) -> Result<SoundClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 || nch > 2 {
        return Err(Error::UnsupportedFormat { path: path.into(), reason: format!("{nch} channels") });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                reason: format!("{bits}-bit {fmt:?}; only 16-bit PCM and 32-bit float are read"),
            })
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    SoundClip::new(channels, spec.sample_rate).map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })
}

/// Writes a clip as 32-bit float WAV.
pub fn write_clip(path: impl AsRef<Path>, clip: &SoundClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for i in 0..clip.len() {
        for c in &clip.channels {
            w.write_sample(c[i] as f32).map_err(|e| map_hound(path, e))?;
        }
    }
    w.finalize().map_err(|e| map_hound(path, e))
}

/// Writes a clip as 16-bit PCM WAV, clamping to the representable range.
pub fn write_clip_pcm16(path: impl AsRef<Path>, clip: &SoundClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for i in 0..clip.len() {
        for c in &clip.channels {
            let v = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(|e| map_hound(path, e))?;
        }
    }
    w.finalize().map_err(|e| map_hound(path, e))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const KAISER_BETA: f64 = 8.0;
const SINC_ZERO_CROSSINGS: f64 = 16.0;
const ROLLOFF: f64 = 0.95;

/// Rational polyphase resampler with a Kaiser-windowed sinc kernel.
struct Polyphase {
    up: usize,
    down: usize,
    /// First input index relative to the integer output position.
    offset: isize,
    /// `up` phases, each with the same number of taps.
    taps: Vec<Vec<f64>>,
}

impl Polyphase {
    fn new(src: u32, dst: u32) -> Self {
        let g = gcd(u64::from(src), u64::from(dst));
        let up = (u64::from(dst) / g) as usize;
        let down = (u64::from(src) / g) as usize;
        // Cutoff in cycles per input sample.
        let fc = 0.5 * (up as f64 / down as f64).min(1.0) * ROLLOFF;
        let half_width = SINC_ZERO_CROSSINGS / (2.0 * fc);
        let reach = half_width.ceil() as isize;
        let offset = -reach + 1;
        let ntaps = (2 * reach) as usize;
        let i0b = bessel_i0(KAISER_BETA);
        let taps = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut h: Vec<f64> = (0..ntaps)
                    .map(|j| {
                        // input index k = i0 + offset + j; u = t - k
                        let u = frac - (offset + j as isize) as f64;
                        let x = u / half_width;
                        if x.abs() > 1.0 {
                            return 0.0;
                        }
                        let arg = 2.0 * fc * u;
                        let sinc = if arg.abs() < 1e-12 {
                            1.0
                        } else {
                            (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                        };
                        let w = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0b;
                        2.0 * fc * sinc * w
                    })
                    .collect();
                let s: f64 = h.iter().sum();
                for v in &mut h {
                    *v /= s;
                }
                h
            })
            .collect();
        Self { up, down, offset, taps }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        (0..out_len)
            .map(|n| {
                let pos = n * self.down;
                let i0 = (pos / self.up) as isize;
                let h = &self.taps[pos % self.up];
                let start = i0 + self.offset;
                h.iter()
                    .enumerate()
                    .filter_map(|(j, w)| {
                        let k = start + j as isize;
                        (k >= 0 && (k as usize) < x.len()).then(|| w * x[k as usize])
                    })
                    .sum()
            })
            .collect()
    }
}

fn mean_center(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    for v in x {
        *v -= m;
    }
}

/// Resamples to `target_rate` and removes the per-channel mean.
///
/// Output length is `round(len * target_rate / source_rate)`.
pub fn resample(clip: &SoundClip, target_rate: u32) -> Result<SoundClip> {
    if target_rate == 0 {
        return Err(Error::InvalidAudio("target rate must be positive".into()));
    }
    let src = clip.sample_rate;
    let mut channels: Vec<Vec<f64>> = if src == target_rate {
        clip.channels.clone()
    } else {
        let out_len = ((clip.len() as f64) * f64::from(target_rate) / f64::from(src)).round() as usize;
        let pp = Polyphase::new(src, target_rate);
        clip.channels.iter().map(|c| pp.apply(c, out_len)).collect()
    };
    for c in &mut channels {
        mean_center(c);
    }
    SoundClip::new(channels, target_rate)
}

/// Variance floor used by instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-8;

/// Zero mean, unit (biased) variance; constant input maps to zeros.
pub fn instance_normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.max(INSTANCE_NORM_EPS).sqrt();
    for v in x {
        *v = (*v - mean) * inv;
    }
}

/// One training instance: a fixed-length window from every channel of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub channels: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropBatch {
    pub instances: Vec<Crop>,
    /// Index into the input clip list for each instance.
    pub source_ids: Vec<usize>,
    pub crop_len: usize,
}

impl CropBatch {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub crop_factor: usize,
    pub crop_seconds: f64,
    /// Zero-pad clips shorter than the window instead of skipping them.
    pub pad_short: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { crop_factor: 8, crop_seconds: 2.0, pad_short: true }
    }
}

/// Draws `crop_factor` windows per clip with independent uniform start
/// offsets and instance-normalizes each channel of each window.
///
/// Each window's offset is keyed by `(seed, clip index, crop index)`, so the
/// batch does not depend on the rayon thread count.
pub fn crop_batch(clips: &[SoundClip], cfg: &CropConfig, seed: u64) -> Result<CropBatch> {
    if cfg.crop_factor == 0 {
        return Err(Error::InvalidAudio("crop_factor must be at least 1".into()));
    }
    if !(cfg.crop_seconds > 0.0) {
        return Err(Error::InvalidAudio("crop_seconds must be positive".into()));
    }
    let rate = match clips.first() {
        Some(c) => c.sample_rate,
        None => return Ok(CropBatch { instances: vec![], source_ids: vec![], crop_len: 0 }),
    };
    if let Some(c) = clips.iter().find(|c| c.sample_rate != rate) {
        return Err(Error::RateMismatch(rate, c.sample_rate));
    }
    let crop_len = (cfg.crop_seconds * f64::from(rate)).round() as usize;
    let jobs: Vec<(usize, usize)> =
        (0..clips.len()).flat_map(|ci| (0..cfg.crop_factor).map(move |j| (ci, j))).collect();
    let crops: Vec<Option<(usize, Crop)>> = jobs
        .par_iter()
        .map(|&(ci, j)| {
            let clip = &clips[ci];
            let len = clip.len();
            let channels: Vec<Vec<f64>> = if len >= crop_len {
                let mut rng = seed::rng(seed, &[seed::CROP, ci as u64, j as u64]);
                let start = rng.gen_range(0..=len - crop_len);
                clip.channels.iter().map(|c| c[start..start + crop_len].to_vec()).collect()
            } else if cfg.pad_short {
                clip.channels
                    .iter()
                    .map(|c| {
                        let mut v = c.clone();
                        v.resize(crop_len, 0.0);
                        v
                    })
                    .collect()
            } else {
                if j == 0 {
                    log::warn!("skipping clip {ci}: {len} samples is shorter than the {crop_len}-sample crop");
                }
                return None;
            };
            let mut crop = Crop { channels };
            for c in &mut crop.channels {
                instance_normalize(c);
            }
            Some((ci, crop))
        })
        .collect();
    let (source_ids, instances) = crops.into_iter().flatten().unzip();
    Ok(CropBatch { instances, source_ids, crop_len })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<String>,
}

/// Reads a newline-delimited manifest: one path per line with an optional
/// tab-separated label. Blank lines and `#` comments are ignored. Relative
/// paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let entries: Vec<ManifestEntry> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let mut parts = l.splitn(2, '\t');
            let p = PathBuf::from(parts.next().unwrap_or_default().trim());
            let label = parts.next().map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
            ManifestEntry { path: if p.is_absolute() { p } else { base.join(p) }, label }
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::Manifest(format!("manifest {} lists no files", path.display())));
    }
    Ok(entries)
}
