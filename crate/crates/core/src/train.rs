//! The pretraining loop.
//!
//! One step: draw a batch of clips, cut `crop_factor` crops from each, sample
//! context and target blocks per crop, run every crop on its own tape in
//! parallel, reduce gradients in crop order, apply AdamW, then move the target
//! encoder towards the context encoder.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{crop_batch, load_clip, resample, CropBatch, ManifestEntry, SoundClip};
use crate::jepa::{JepaGrads, JepaModel, JepaState};
use crate::nat::NatSource;
use crate::optim::{warmup_cosine, AdamW, AdamWConfig};
use crate::param::ParamStore;
use crate::sampler::{sample_blocks, sample_blocks_shared};
use crate::seed;
use crate::tensor::Tensor;

/// What to do when a step produces a non-finite loss or gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Abort,
    /// Leave all weights untouched for that step and log a warning.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clips per step.
    pub batch_size: usize,
    /// Crops per clip.
    pub crop_factor: usize,
    pub seed: u64,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: u64,
    pub nan_policy: NanPolicy,
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            v.push(format!("peak_lr: {} must be a non-negative number", self.peak_lr));
        }
        if self.total_steps == 0 {
            v.push("total_steps: must be at least 1".into());
        }
        if self.warmup_steps > self.total_steps {
            v.push(format!("warmup_steps: {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("weight_decay: {} must be non-negative", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name}: {b} is not in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("eps: {} must be positive", self.eps));
        }
        if self.batch_size == 0 {
            v.push("batch_size: must be at least 1".into());
        }
        if self.crop_factor == 0 {
            v.push("crop_factor: must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            v.push("checkpoint_every: must be at least 1".into());
        }
        v
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Learning rate used by update `step` (zero-based).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    warmup_cosine(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Updates completed, counting this one.
    pub step: u64,
    /// Mean loss over the crops of the batch; `None` when it was not finite.
    pub loss: Option<f64>,
    pub lr: f64,
    pub tau: f64,
}

/// Reads and resamples every clip of a manifest, in manifest order.
pub fn load_training_clips(entries: &[ManifestEntry], sample_rate: u32) -> Result<Vec<SoundClip>> {
    entries
        .par_iter()
        .map(|e| {
            let clip = load_clip(&e.path)?;
            if clip.sample_rate() == sample_rate {
                Ok(clip)
            } else {
                resample(&clip, sample_rate)
            }
        })
        .collect()
}

fn downmix(clip: SoundClip) -> SoundClip {
    if clip.num_channels() == 1 {
        return clip;
    }
    let rate = clip.sample_rate();
    let ch = clip.channels();
    let mono = ch[0].iter().zip(&ch[1]).map(|(a, b)| 0.5 * (a + b)).collect();
    SoundClip::mono(mono, rate).expect("average of finite samples is finite")
}

/// Clip pool for the trainer.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Single-channel clips, visited in a fresh shuffled order each epoch.
    Mono(Vec<SoundClip>),
    /// Clean clips and scenes drawn with the configured clean ratio.
    Nat(NatSource),
}

impl TrainData {
    /// Builds the pool the configuration asks for. Stereo clips are averaged
    /// to mono for the single-channel model; for the binaural model mono
    /// clips form the clean pool and stereo clips the scene pool.
    pub fn from_clips(clips: Vec<SoundClip>, cfg: &RunConfig) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Manifest("no training clips".into()));
        }
        if let Some(c) = clips.iter().find(|c| c.sample_rate() != cfg.ingest.sample_rate) {
            return Err(Error::RateMismatch(cfg.ingest.sample_rate, c.sample_rate()));
        }
        if cfg.nat.enabled {
            Ok(TrainData::Nat(NatSource::from_clips(clips, cfg.nat.clean_ratio)?))
        } else {
            Ok(TrainData::Mono(clips.into_iter().map(downmix).collect()))
        }
    }

    /// Pool indices of the clips used by update `step` in single-channel
    /// mode: consecutive slots of a sequence of per-epoch shuffles.
    pub fn epoch_slots(pool_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
        let c = pool_len as u64;
        let b = batch_size as u64;
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (step * b..step * b + b)
            .map(|slot| {
                let epoch = slot / c;
                if epoch != perm_epoch {
                    perm = (0..pool_len).collect();
                    perm.shuffle(&mut seed::rng(seed, &[seed::EPOCH, epoch]));
                    perm_epoch = epoch;
                }
                perm[(slot % c) as usize]
            })
            .collect()
    }

    /// Crops for update `step`.
    pub fn batch(&self, cfg: &RunConfig, step: u64) -> Result<CropBatch> {
        let seed = cfg.trainer.seed;
        let clips: Vec<SoundClip> = match self {
            TrainData::Mono(pool) => {
                Self::epoch_slots(pool.len(), cfg.trainer.batch_size, seed, step).into_iter().map(|i| pool[i].clone()).collect()
            }
            TrainData::Nat(src) => (0..cfg.trainer.batch_size as u64).map(|j| src.draw(seed, step, j).1).collect(),
        };
        crop_batch(&clips, &cfg.crop_config(), seed::derive(seed, &[seed::CROP, step]))
    }
}

/// Model, weights, optimizer and data of a run.
pub struct Trainer {
    config: RunConfig,
    model: JepaModel,
    state: JepaState,
    opt: AdamW,
    data: TrainData,
}

const OPTIMIZER_GROUP: &str = "optimizer";

impl Trainer {
    pub fn new(config: RunConfig, data: TrainData) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let (model, state) = JepaModel::init(&config.model_config(), config.trainer.seed)?;
        let opt = AdamW::new(config.trainer.adamw(), &state.trainable());
        Ok(Self { config, model, state, opt, data })
    }

    /// Restores a run. With `config`, its hash must match the checkpoint's.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<&RunConfig>, data: TrainData) -> Result<Self> {
        let stored = RunConfig::from_json(&ckpt.config_json)?;
        if let Some(c) = config {
            if c.to_json() != ckpt.config_json {
                return Err(Error::Checkpoint("the given config differs from the one stored in the checkpoint".into()));
            }
        }
        let mut t = Self::new(stored, data)?;
        t.load_groups(ckpt)?;
        Ok(t)
    }

    fn load_groups(&mut self, ckpt: &Checkpoint) -> Result<()> {
        load_state(&mut self.state, ckpt)?;
        for (i, m) in self.opt.m.iter_mut().enumerate() {
            load_group(ckpt, m, &format!("adam_m.{i}"))?;
        }
        for (i, v) in self.opt.v.iter_mut().enumerate() {
            load_group(ckpt, v, &format!("adam_v.{i}"))?;
        }
        let t = group(ckpt, OPTIMIZER_GROUP)?
            .params()
            .first()
            .map(|p| p.value.scalar_value())
            .ok_or_else(|| Error::Checkpoint("optimizer group is empty".into()))?;
        self.opt.t = t as u64;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups: Vec<(String, ParamStore)> = Vec::new();
        for (i, w) in self.state.wave.iter().enumerate() {
            groups.push((format!("wave{i}"), w.clone()));
        }
        groups.push(("context".into(), self.state.context.clone()));
        groups.push(("target".into(), self.state.target.clone()));
        groups.push(("predictor".into(), self.state.predictor.clone()));
        for (i, m) in self.opt.m.iter().enumerate() {
            groups.push((format!("adam_m.{i}"), m.clone()));
        }
        for (i, v) in self.opt.v.iter().enumerate() {
            groups.push((format!("adam_v.{i}"), v.clone()));
        }
        let mut o = ParamStore::new();
        o.push("t", Tensor::scalar(self.opt.t as f64), false);
        groups.push((OPTIMIZER_GROUP.into(), o));
        Checkpoint { step: self.state.step, seed: self.config.trainer.seed, config_json: self.config.to_json(), groups }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &JepaModel {
        &self.model
    }

    pub fn state(&self) -> &JepaState {
        &self.state
    }

    /// Loss and mean gradient over the crops of update `step`, without
    /// changing any weights. Crops that drew no target block are left out.
    pub fn batch_gradients(&self, step: u64) -> Result<(Option<f64>, Option<JepaGrads>)> {
        let batch = self.data.batch(&self.config, step)?;
        if batch.is_empty() {
            return Err(Error::Manifest("every clip is shorter than the crop and padding is off".into()));
        }
        let n = self.model.frames_for(batch.crop_len)?;
        let channels = self.model.channels();
        let seed = self.config.trainer.seed;
        let outs: Vec<Result<Option<(f64, JepaGrads)>>> = batch
            .instances
            .par_iter()
            .enumerate()
            .map(|(j, crop)| {
                let s = seed::derive(seed, &[seed::SAMPLER, step, j as u64]);
                let sampling = if channels == 1 {
                    sample_blocks(n, &self.config.sampler, s)?
                } else {
                    sample_blocks_shared(n, channels, &self.config.sampler, s)?
                };
                if sampling.num_targets() == 0 {
                    return Ok(None);
                }
                match self.model.instance_forward(&self.state, &crop.channels, &sampling, None, true) {
                    Ok(out) => Ok(Some((out.loss, out.grads.expect("gradients requested")))),
                    Err(Error::NonFinite(_)) => Ok(Some((f64::NAN, JepaGrads::zeros_like(&self.state)))),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut grads: Option<JepaGrads> = None;
        for o in outs {
            if let Some((loss, g)) = o? {
                total += loss;
                count += 1;
                match &mut grads {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
        }
        if count == 0 {
            return Ok((None, None));
        }
        let inv = 1.0 / count as f64;
        if let Some(g) = &mut grads {
            g.scale_in_place(inv);
        }
        Ok((Some(total * inv), grads))
    }

    /// Runs one update and returns its metrics record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let i = self.state.step;
        let lr = lr_at(i, &self.config.trainer);
        let (loss, grads) = self.batch_gradients(i)?;
        let finite = loss.is_some_and(f64::is_finite) && grads.as_ref().is_some_and(JepaGrads::is_finite);
        let tau;
        if finite {
            let g = grads.expect("checked above");
            self.opt.step(&mut self.state.trainable_mut(), &g.groups(), lr);
            tau = self.state.ema_update(&self.config.model.ema);
        } else if loss.is_none() {
            log::warn!("step {}: no crop drew a target block; weights unchanged", i + 1);
            tau = self.config.model.ema.tau(i);
            self.state.step += 1;
        } else {
            match self.config.trainer.nan_policy {
                NanPolicy::Abort => return Err(Error::NonFiniteGradient(i + 1)),
                NanPolicy::Skip => {
                    log::warn!("step {}: non-finite loss or gradient; update skipped", i + 1);
                    tau = self.config.model.ema.tau(i);
                    self.state.step += 1;
                }
            }
        }
        Ok(StepRecord { step: i + 1, loss: loss.filter(|l| l.is_finite()), lr, tau })
    }

    /// Trains until `total_steps`, appending to `out/metrics.jsonl` and saving
    /// `out/ckpt-<step>.bin` every `checkpoint_every` steps and at the end.
    /// Metrics lines past the current step, left by an earlier run, are
    /// dropped first.
    pub fn run(&mut self, out: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
        self.run_until(out, self.config.trainer.total_steps)
    }

    pub fn run_until(&mut self, out: impl AsRef<Path>, until: u64) -> Result<Vec<StepRecord>> {
        let out = out.as_ref();
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let metrics = out.join("metrics.jsonl");
        let kept = if self.state.step == 0 { Vec::new() } else { read_metrics_upto(&metrics, self.state.step)? };
        let file = std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
        let mut w = BufWriter::new(file);
        for line in kept {
            writeln!(w, "{line}").map_err(|e| Error::io(&metrics, e))?;
        }
        let until = until.min(self.config.trainer.total_steps);
        let mut records = Vec::new();
        while self.state.step < until {
            let r = self.step()?;
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&metrics, e))?;
            if r.step % 10 == 0 || r.step == 1 {
                log::info!("step {} loss {:?} lr {:.3e} tau {:.6}", r.step, r.loss, r.lr, r.tau);
            }
            if r.step % self.config.trainer.checkpoint_every == 0 || r.step == until {
                w.flush().map_err(|e| Error::io(&metrics, e))?;
                self.checkpoint().save(checkpoint_path(out, r.step))?;
            }
            records.push(r);
        }
        w.flush().map_err(|e| Error::io(&metrics, e))?;
        Ok(records)
    }
}

fn group<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a ParamStore> {
    ckpt.group(name).ok_or_else(|| Error::Checkpoint(format!("missing group {name}")))
}

fn load_group(ckpt: &Checkpoint, dst: &mut ParamStore, name: &str) -> Result<()> {
    dst.load_values(group(ckpt, name)?).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

fn load_state(state: &mut JepaState, ckpt: &Checkpoint) -> Result<()> {
    for (i, w) in state.wave.iter_mut().enumerate() {
        load_group(ckpt, w, &format!("wave{i}"))?;
    }
    load_group(ckpt, &mut state.context, "context")?;
    load_group(ckpt, &mut state.target, "target")?;
    load_group(ckpt, &mut state.predictor, "predictor")?;
    state.step = ckpt.step;
    Ok(())
}

/// Rebuilds the stored config, model and weights of a checkpoint, without
/// optimizer state or training data.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(RunConfig, JepaModel, JepaState)> {
    let config = RunConfig::from_json(&ckpt.config_json)?;
    let (model, mut state) = JepaModel::init(&config.model_config(), config.trainer.seed)?;
    load_state(&mut state, ckpt)?;
    Ok((config, model, state))
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt-{step}.bin"))
}

fn read_metrics_upto(path: &Path, step: u64) -> Result<Vec<String>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Ok(r) = serde_json::from_str::<StepRecord>(&line) {
            if r.step <= step {
                kept.push(line);
            }
        }
    }
    Ok(kept)
}
