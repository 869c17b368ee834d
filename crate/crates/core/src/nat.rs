//! Naturalistic scenes: binaural reverberation, noise fields mixed at a
//! requested SNR, and the clean/scene draw used by the binaural trainer.

use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{load_clip, SoundClip};
use crate::jepa::{JepaModel, JepaState};
use crate::seed;
use crate::tensor::Tensor;

pub const NOISE_MAX_SECONDS: f64 = 10.0;
pub const NOISE_FADE_SECONDS: f64 = 0.2;
pub const SNR_RANGE_DB: (f64, f64) = (5.0, 40.0);

/// A binaural impulse response, two channels of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseResponse {
    taps: [Vec<f64>; 2],
    sample_rate: u32,
    pub id: String,
}

impl ImpulseResponse {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        if left.len() != right.len() || left.is_empty() {
            return Err(Error::InvalidAudio("impulse response channels must be non-empty and equal in length".into()));
        }
        if left.iter().chain(&right).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("impulse response taps"));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        Ok(Self { taps: [left, right], sample_rate, id: id.into() })
    }

    /// Unit impulse delayed by `delay` taps on both channels.
    pub fn delay(delay: usize, sample_rate: u32) -> Self {
        let mut t = vec![0.0; delay + 1];
        t[delay] = 1.0;
        Self { taps: [t.clone(), t], sample_rate, id: format!("delay{delay}") }
    }

    /// Reads a WAV file; a mono file is used for both ears.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let clip = load_clip(path)?.duplicated_to_stereo();
        let rate = clip.sample_rate();
        let mut ch = clip.into_channels().into_iter();
        let (l, r) = (ch.next().unwrap_or_default(), ch.next().unwrap_or_default());
        Self::new(l, r, rate, path.display().to_string())
    }

    pub fn taps(&self, channel: usize) -> &[f64] {
        &self.taps[channel]
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps[0].is_empty()
    }
}

/// Full linear convolution of `x` and `h` via zero-padded FFT, truncated to
/// `out_len` samples.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(size, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    let mut out: Vec<f64> = a.iter().take(full.min(out_len)).map(|c| c.re * scale).collect();
    out.resize(out_len, 0.0);
    out
}

/// Reverberates `clip` with `brir`, truncated to the clip length. A mono clip
/// feeds both ears; a stereo clip is filtered channel by channel.
pub fn convolve_brir(clip: &SoundClip, brir: &ImpulseResponse) -> Result<SoundClip> {
    if clip.sample_rate() != brir.sample_rate() {
        return Err(Error::RateMismatch(clip.sample_rate(), brir.sample_rate()));
    }
    let out = (0..2)
        .map(|c| {
            let x = clip.channel(c.min(clip.num_channels() - 1));
            fft_convolve(x, brir.taps(c), x.len())
        })
        .collect();
    SoundClip::new(out, clip.sample_rate())
}

/// Trims to at most ten seconds and applies 200 ms linear fades at both ends.
pub fn prepare_noise(clip: &SoundClip) -> SoundClip {
    let rate = clip.sample_rate() as f64;
    let keep = clip.len().min((NOISE_MAX_SECONDS * rate).round() as usize);
    let fade = ((NOISE_FADE_SECONDS * rate).round() as usize).max(1);
    let channels = clip
        .channels()
        .iter()
        .map(|ch| {
            (0..keep)
                .map(|t| {
                    let up = (t as f64 / fade as f64).min(1.0);
                    let down = ((keep - 1 - t) as f64 / fade as f64).min(1.0);
                    ch[t] * up.min(down)
                })
                .collect()
        })
        .collect();
    SoundClip::new(channels, clip.sample_rate()).expect("trimming preserves validity")
}

/// Root mean square over all channels jointly.
pub fn rms(clip: &SoundClip) -> f64 {
    let n = (clip.len() * clip.num_channels()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    (clip.channels().iter().flatten().map(|v| v * v).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub source: SoundClip,
    pub source_brir: ImpulseResponse,
    pub noises: Vec<SoundClip>,
    pub noise_brirs: Vec<ImpulseResponse>,
    pub snr_db: f64,
    /// Several noise locations summed into a diffuse field.
    pub diffuse: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.noises.len() != self.noise_brirs.len() {
            v.push(format!("{} noise clips but {} noise impulse responses", self.noises.len(), self.noise_brirs.len()));
        }
        let expected = if self.diffuse { 3..=5 } else { 1..=1 };
        if !expected.contains(&self.noises.len()) {
            v.push(format!(
                "{} scene needs {}..={} noise sources, got {}",
                if self.diffuse { "diffuse" } else { "localized" },
                expected.start(),
                expected.end(),
                self.noises.len()
            ));
        }
        if !(SNR_RANGE_DB.0..=SNR_RANGE_DB.1).contains(&self.snr_db) {
            v.push(format!("snr_db {} outside [{}, {}]", self.snr_db, SNR_RANGE_DB.0, SNR_RANGE_DB.1));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub requested_snr_db: f64,
    pub achieved_snr_db: f64,
    /// Noise gain `b`.
    pub noise_gain: f64,
    pub rms_source: f64,
    pub rms_noise: f64,
}

#[derive(Clone, Debug)]
pub struct MixedScene {
    pub clip: SoundClip,
    pub report: MixReport,
}

fn fit_length(clip: &SoundClip, len: usize) -> Vec<Vec<f64>> {
    clip.channels()
        .iter()
        .map(|c| {
            let mut v = c[..c.len().min(len)].to_vec();
            v.resize(len, 0.0);
            v
        })
        .collect()
}

/// `S = T + bN` with `T` the reverberant source and `N` the sum of the
/// reverberant, faded noises, zero-padded or cut to the source length.
pub fn mix_scene(spec: &SceneSpec) -> Result<MixedScene> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let rate = spec.source.sample_rate();
    let t = convolve_brir(&spec.source, &spec.source_brir)?;
    let len = t.len();
    let mut field = vec![vec![0.0; len]; 2];
    for (noise, brir) in spec.noises.iter().zip(&spec.noise_brirs) {
        if noise.sample_rate() != rate {
            return Err(Error::RateMismatch(rate, noise.sample_rate()));
        }
        let wet = convolve_brir(&prepare_noise(noise), brir)?;
        for (acc, ch) in field.iter_mut().zip(fit_length(&wet, len)) {
            for (a, v) in acc.iter_mut().zip(ch) {
                *a += v;
            }
        }
    }
    let n = SoundClip::new(field, rate)?;
    let (rt, rn) = (rms(&t), rms(&n));
    if rn == 0.0 {
        return Err(Error::SilentNoise);
    }
    if rt == 0.0 {
        return Err(Error::InvalidAudio("silent source: SNR is undefined".into()));
    }
    let b = rt / rn * 10f64.powf(-spec.snr_db / 20.0);
    let mixed: Vec<Vec<f64>> =
        t.channels().iter().zip(n.channels()).map(|(tc, nc)| tc.iter().zip(nc).map(|(a, c)| a + b * c).collect()).collect();
    let achieved = 20.0 * (rt / (b * rn)).log10();
    Ok(MixedScene {
        clip: SoundClip::new(mixed, rate)?,
        report: MixReport { requested_snr_db: spec.snr_db, achieved_snr_db: achieved, noise_gain: b, rms_source: rt, rms_noise: rn },
    })
}

/// Stacked frame embeddings of a two-channel clip: rows `0..N` come from the
/// first encoder, rows `N..2N` from the second. Positions are not added.
pub fn encode_wave_dual(model: &JepaModel, state: &JepaState, scene: &SoundClip) -> Result<Tensor> {
    if scene.num_channels() != 2 || model.channels() != 2 {
        return Err(Error::Shape(format!(
            "dual encoding needs a 2-channel clip and model, got {} and {}",
            scene.num_channels(),
            model.channels()
        )));
    }
    let mut tape = crate::tape::Tape::new();
    let b = model.bind(&mut tape, state, false, false);
    let w = model.embed_waves(&mut tape, &b, scene.channels())?;
    Ok(tape.value(w).clone())
}

/// One row of a scene manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub source: PathBuf,
    pub brir: PathBuf,
    pub noises: Vec<PathBuf>,
    pub noise_brirs: Vec<PathBuf>,
    pub snr_db: f64,
    pub diffuse: bool,
}

impl SceneEntry {
    pub fn load(&self) -> Result<SceneSpec> {
        Ok(SceneSpec {
            source: load_clip(&self.source)?,
            source_brir: ImpulseResponse::load(&self.brir)?,
            noises: self.noises.iter().map(load_clip).collect::<Result<_>>()?,
            noise_brirs: self.noise_brirs.iter().map(ImpulseResponse::load).collect::<Result<_>>()?,
            snr_db: self.snr_db,
            diffuse: self.diffuse,
        })
    }
}

/// Parses a tab-separated scene manifest with columns
/// `source, brir, noises, noise_brirs, snr_db, diffuse`. List columns are
/// comma-separated. A first line starting with `source` is a header.
pub fn read_scene_manifest(path: impl AsRef<Path>) -> Result<Vec<SceneEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |s: &str| {
        let p = PathBuf::from(s.trim());
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("source")) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Manifest(format!("{}:{}: expected 6 tab-separated columns, got {}", path.display(), i + 1, f.len())));
        }
        let list = |s: &str| s.split(',').filter(|p| !p.trim().is_empty()).map(resolve).collect::<Vec<_>>();
        let snr_db = f[4]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Manifest(format!("{}:{}: bad snr_db {:?}", path.display(), i + 1, f[4])))?;
        let diffuse = match f[5].trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "diffuse" => true,
            "0" | "false" | "no" | "localized" => false,
            other => return Err(Error::Manifest(format!("{}:{}: bad diffuse flag {other:?}", path.display(), i + 1))),
        };
        out.push(SceneEntry { source: resolve(f[0]), brir: resolve(f[1]), noises: list(f[2]), noise_brirs: list(f[3]), snr_db, diffuse });
    }
    if out.is_empty() {
        return Err(Error::Manifest(format!("scene manifest {} lists no scenes", path.display())));
    }
    Ok(out)
}

/// Training pool for the binaural model: clean clips are presented on two
/// identical channels with probability `clean_ratio`, naturalistic scenes
/// otherwise.
#[derive(Clone, Debug)]
pub struct NatSource {
    clean: Vec<SoundClip>,
    scenes: Vec<SoundClip>,
    clean_ratio: f64,
}

impl NatSource {
    pub fn new(clean: Vec<SoundClip>, scenes: Vec<SoundClip>, clean_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&clean_ratio) {
            return Err(Error::Config(vec![format!("nat.clean_ratio {clean_ratio} is not in [0, 1]")]));
        }
        if scenes.iter().any(|s| s.num_channels() != 2) {
            return Err(Error::InvalidAudio("naturalistic scenes must have two channels".into()));
        }
        let need_clean = clean_ratio > 0.0;
        let need_scenes = clean_ratio < 1.0;
        if (need_clean && clean.is_empty()) || (need_scenes && scenes.is_empty()) {
            return Err(Error::Manifest(format!(
                "clean ratio {clean_ratio} needs {} clean and {} scene clips, found {} and {}",
                if need_clean { "some" } else { "no" },
                if need_scenes { "some" } else { "no" },
                clean.len(),
                scenes.len()
            )));
        }
        Ok(Self { clean, scenes, clean_ratio })
    }

    /// Splits mixed clips by channel count: mono clips are clean, stereo
    /// clips are scenes.
    pub fn from_clips(clips: Vec<SoundClip>, clean_ratio: f64) -> Result<Self> {
        let (clean, scenes) = clips.into_iter().partition(|c| c.num_channels() == 1);
        Self::new(clean, scenes, clean_ratio)
    }

    pub fn clean_ratio(&self) -> f64 {
        self.clean_ratio
    }

    /// Draw for batch slot `slot` of step `step`: whether it is clean, and the
    /// two-channel clip.
    pub fn draw(&self, seed: u64, step: u64, slot: u64) -> (bool, SoundClip) {
        let mut rng = seed::rng(seed, &[seed::NAT_DRAW, step, slot]);
        let clean = rng.gen::<f64>() < self.clean_ratio;
        let pool = if clean { &self.clean } else { &self.scenes };
        let clip = &pool[rng.gen_range(0..pool.len())];
        (clean, clip.duplicated_to_stereo())
    }
}
