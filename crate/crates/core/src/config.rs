//! Run configuration: named profiles, user overrides and validation.
//!
//! A config file (TOML or JSON) is merged key by key over the defaults of its
//! profile, so an empty file yields the complete profile. Unknown keys are
//! rejected and every violated constraint is reported with its field path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::CropConfig;
use crate::jepa::{EmaSchedule, ModelConfig, TargetSpec, TransformerConfig};
use crate::optim::AdamWConfig;
use crate::sampler::SamplerConfig;
use crate::train::{NanPolicy, TrainConfig};
use crate::transformer::PosScheme;
use crate::wave_encoder::ConvStackConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Seconds-per-step CPU scale for smoke runs and tests.
    Tiny,
    /// A structure-preserving shrink that still fits a workstation.
    Desk,
    /// Full-size encoder and schedule.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(vec![format!("profile: unknown profile {other:?} (tiny, desk, paper)")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub sample_rate: u32,
    pub crop_seconds: f64,
    /// Zero-pad clips shorter than a crop instead of skipping them.
    pub pad_short: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub predictor_depth: usize,
    pub predictor_width: usize,
    pub predictor_heads: usize,
    pub positional_scheme: PosScheme,
    pub top_k: usize,
    pub ema: EmaSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatConfig {
    /// Two-channel model with dual waveform encoders.
    pub enabled: bool,
    /// Probability of drawing a clean clip instead of a scene.
    pub clean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// L2 penalty of the logistic-regression probe.
    pub probe_l2: f64,
    /// Convergence tolerance on the probe's gradient norm.
    pub probe_tol: f64,
    /// Clips per class generated for synthetic probe tasks.
    pub probe_clips_per_class: usize,
    /// Row used as the reference model when scoring tables.
    pub baseline: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub ingest: IngestConfig,
    pub encoder: ConvStackConfig,
    pub sampler: SamplerConfig,
    pub model: ModelSection,
    pub trainer: TrainConfig,
    pub nat: NatConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let ingest = IngestConfig { sample_rate: 16_000, crop_seconds: 2.0, pad_short: true };
        let nat = NatConfig { enabled: false, clean_ratio: 0.0 };
        let eval = EvalConfig { probe_l2: 1e-4, probe_tol: 1e-6, probe_clips_per_class: 24, baseline: "HEAR-Naive".into() };
        let adam = AdamWConfig::default();
        let trainer = |peak_lr, warmup_steps, total_steps, batch_size, crop_factor, checkpoint_every| TrainConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size,
            crop_factor,
            seed: 0,
            checkpoint_every,
            nan_policy: NanPolicy::Abort,
        };
        match profile {
            Profile::Tiny => RunConfig {
                profile,
                ingest: IngestConfig { crop_seconds: 1.0, ..ingest },
                encoder: ConvStackConfig::with_channels(32, 64),
                sampler: SamplerConfig::default(),
                model: ModelSection {
                    depth: 2,
                    width: 64,
                    heads: 4,
                    mlp_ratio: 2.0,
                    predictor_depth: 1,
                    predictor_width: 32,
                    predictor_heads: 2,
                    positional_scheme: PosScheme::Sin1d,
                    top_k: 2,
                    ema: EmaSchedule { tau0: 0.99, tau_e: 0.999, tau_n: 200 },
                },
                trainer: trainer(1e-3, 50, 500, 4, 2, 100),
                nat,
                eval: EvalConfig { probe_clips_per_class: 100, ..eval },
            },
            Profile::Desk => RunConfig {
                profile,
                ingest,
                encoder: ConvStackConfig::with_channels(128, 192),
                sampler: SamplerConfig::default(),
                model: ModelSection {
                    depth: 4,
                    width: 192,
                    heads: 4,
                    mlp_ratio: 4.0,
                    predictor_depth: 2,
                    predictor_width: 96,
                    predictor_heads: 4,
                    positional_scheme: PosScheme::Sin1d,
                    top_k: 4,
                    ema: EmaSchedule { tau0: 0.999, tau_e: 0.99999, tau_n: 10_000 },
                },
                trainer: trainer(2e-4, 2_000, 20_000, 8, 4, 1_000),
                nat,
                eval,
            },
            Profile::Paper => RunConfig {
                profile,
                ingest,
                encoder: ConvStackConfig::paper(),
                sampler: SamplerConfig::default(),
                model: ModelSection {
                    depth: 12,
                    width: 768,
                    heads: 12,
                    mlp_ratio: 4.0,
                    predictor_depth: 12,
                    predictor_width: 384,
                    predictor_heads: 6,
                    positional_scheme: PosScheme::Sin1d,
                    top_k: 8,
                    ema: EmaSchedule::default(),
                },
                trainer: trainer(2e-4, 100_000, 375_000, 32, 8, 10_000),
                nat,
                eval,
            },
        }
    }

    /// Parses `text` and merges it over the profile defaults. The profile is
    /// `profile_override`, else the file's `profile` key, else `paper`.
    pub fn parse(text: &str, json: bool, profile_override: Option<Profile>) -> Result<Self> {
        let user: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else if json {
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("json: {e}")]))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("toml: {}", e.message())]))?
        };
        if !user.is_object() {
            return Err(Error::Config(vec!["config root must be a table".into()]));
        }
        let profile = match (profile_override, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(other)) => return Err(Error::Config(vec![format!("profile: expected a string, got {other}")])),
            (None, None) => Profile::Paper,
        };
        let mut merged = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        merge(&mut merged, user);
        merged["profile"] = serde_json::to_value(profile).expect("profile serializes");
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Reads a `.json` or `.toml` file.
    pub fn load(path: impl AsRef<Path>, profile_override: Option<Profile>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json, profile_override)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Every violated constraint, each prefixed with its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.ingest.sample_rate == 0 {
            v.push("ingest.sample_rate: must be positive".into());
        }
        if !(self.ingest.crop_seconds > 0.0 && self.ingest.crop_seconds.is_finite()) {
            v.push(format!("ingest.crop_seconds: {} must be positive", self.ingest.crop_seconds));
        }
        v.extend(self.encoder.validate().into_iter().map(|e| format!("encoder.{e}")));
        v.extend(self.sampler.validate());
        let m = self.model_config();
        v.extend(m.transformer.validate().into_iter().map(|e| format!("model.{e}")));
        v.extend(m.ema.validate().into_iter().map(|e| format!("model.ema: {e}")));
        if self.encoder.projection_dim != self.model.width {
            v.push(format!("encoder.projection_dim: {} must equal model.width {}", self.encoder.projection_dim, self.model.width));
        }
        if self.model.top_k == 0 || self.model.top_k > self.model.depth {
            v.push(format!("model.top_k: {} must lie in 1..={}", self.model.top_k, self.model.depth));
        }
        v.extend(self.trainer.validate().into_iter().map(|e| format!("trainer.{e}")));
        if self.encoder.validate().is_empty() && self.ingest.sample_rate > 0 && self.ingest.crop_seconds > 0.0 {
            let crop = (self.ingest.crop_seconds * self.ingest.sample_rate as f64).round() as usize;
            match self.encoder.output_length(crop) {
                Ok(n) if n <= self.sampler.m_target => v.push(format!(
                    "ingest.crop_seconds: {crop} samples give {n} frames, not more than sampler.m_target {}",
                    self.sampler.m_target
                )),
                Ok(_) => {}
                Err(e) => v.push(format!("ingest.crop_seconds: {e}")),
            }
        }
        match (self.nat.enabled, self.model.positional_scheme) {
            (true, PosScheme::Sin1d) => v.push("model.positional_scheme: nat.enabled requires sin2d".into()),
            (false, PosScheme::Sin2d) => v.push("model.positional_scheme: sin2d requires nat.enabled".into()),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.nat.clean_ratio) {
            v.push(format!("nat.clean_ratio: {} is not in [0, 1]", self.nat.clean_ratio));
        }
        if !(self.eval.probe_l2 >= 0.0) {
            v.push(format!("eval.probe_l2: {} must be non-negative", self.eval.probe_l2));
        }
        if !(self.eval.probe_tol > 0.0) {
            v.push(format!("eval.probe_tol: {} must be positive", self.eval.probe_tol));
        }
        if self.eval.probe_clips_per_class < 2 {
            v.push("eval.probe_clips_per_class: must be at least 2".into());
        }
        v
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: self.encoder.clone(),
            transformer: TransformerConfig {
                depth: m.depth,
                width: m.width,
                heads: m.heads,
                mlp_ratio: m.mlp_ratio,
                predictor_depth: m.predictor_depth,
                predictor_width: m.predictor_width,
                predictor_heads: m.predictor_heads,
                positional_scheme: m.positional_scheme,
            },
            target: TargetSpec { top_k: m.top_k },
            ema: m.ema,
        }
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig { crop_factor: self.trainer.crop_factor, crop_seconds: self.ingest.crop_seconds, pad_short: self.ingest.pad_short }
    }

    /// Samples per crop at the configured rate.
    pub fn crop_samples(&self) -> usize {
        (self.ingest.crop_seconds * self.ingest.sample_rate as f64).round() as usize
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_profile() {
        let c = RunConfig::parse("", false, Some(Profile::Tiny)).unwrap();
        assert_eq!(c, RunConfig::profile(Profile::Tiny));
        let p = RunConfig::parse("", false, None).unwrap();
        assert_eq!(p.profile, Profile::Paper);
        assert_eq!(p.trainer.weight_decay, 0.04);
        assert_eq!(p.trainer.peak_lr, 2e-4);
        for prof in [Profile::Tiny, Profile::Desk, Profile::Paper] {
            assert!(RunConfig::profile(prof).validate().is_empty(), "{prof:?}");
        }
    }

    #[test]
    fn overrides_merge_and_unknown_keys_fail() {
        let c = RunConfig::parse("profile = \"tiny\"\n[trainer]\nseed = 9\n[model.ema]\ntau_n = 7\n", false, None).unwrap();
        assert_eq!(c.trainer.seed, 9);
        assert_eq!(c.model.ema.tau_n, 7);
        assert_eq!(c.model.width, 64);
        let j = RunConfig::parse("{\"trainer\": {\"batch_size\": 2}}", true, Some(Profile::Tiny)).unwrap();
        assert_eq!(j.trainer.batch_size, 2);
        let e = RunConfig::parse("[trainer]\nbogus = 1\n", false, Some(Profile::Tiny)).unwrap_err();
        assert!(e.to_string().contains("bogus"));
    }

    #[test]
    fn violations_are_all_reported_with_paths() {
        let text = "[nat]\nenabled = true\n[model]\nheads = 5\n[trainer]\nwarmup_steps = 1000\ntotal_steps = 10\n";
        let Err(Error::Config(errs)) = RunConfig::parse(text, false, Some(Profile::Tiny)) else { panic!("expected errors") };
        assert!(errs.iter().any(|e| e.starts_with("model.positional_scheme")));
        assert!(errs.iter().any(|e| e.starts_with("model.width")));
        assert!(errs.iter().any(|e| e.starts_with("trainer.warmup_steps")));
        let Err(Error::Config(errs)) = RunConfig::parse("[model]\npositional_scheme = \"sin2d\"\n", false, Some(Profile::Tiny))
        else {
            panic!("expected errors")
        };
        assert_eq!(errs.len(), 1);
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::profile(Profile::Desk);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
