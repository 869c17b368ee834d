//! Context and target block sampling over a frame sequence.
//!
//! Target blocks are drawn once per instance. Context blocks are drawn in
//! rounds; after each round, indices that fall inside a target block are
//! removed, and rounds continue until the context covers at least
//! `min_context_fraction` of the sequence.
//!
//! A block start `s` is valid only when the whole block fits (`s + M <= N`);
//! blocks are never truncated at the sequence end.
//!
//! How many blocks start is governed by [`StartRule`]. The default,
//! [`StartRule::FixedCount`], draws `floor(p*N + u)` distinct starts
//! (`u ~ U[0,1)`) uniformly among the valid ones, so the expected number of
//! starts equals a per-index start probability `p` while the covered fraction
//! is capped at `p*M`. [`StartRule::Bernoulli`] instead lets every valid start
//! fire independently with probability `p`.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    #[default]
    FixedCount,
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Per-index start probability for context blocks.
    pub p_context: f64,
    /// Per-index start probability for target blocks.
    pub p_target: f64,
    pub m_context: usize,
    pub m_target: usize,
    pub min_context_fraction: f64,
    /// Upper bound on context rounds before giving up.
    pub max_rounds: usize,
    #[serde(default)]
    pub start_rule: StartRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p_context: 0.065,
            p_target: 0.025,
            m_context: 10,
            m_target: 10,
            min_context_fraction: 0.10,
            max_rounds: 1000,
            start_rule: StartRule::FixedCount,
        }
    }
}

impl SamplerConfig {
    /// Target coverage in the "fraction of the sequence" convention used by
    /// ablation tables (`p_target * m_target`, e.g. 0.25 for the defaults).
    pub fn target_coverage_fraction(&self) -> f64 {
        self.p_target * self.m_target as f64
    }

    /// Sets `p_target` from a coverage fraction such as 0.15 or 0.30.
    pub fn with_target_coverage(mut self, coverage_fraction: f64) -> Self {
        self.p_target = coverage_fraction / self.m_target as f64;
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.p_context > 0.0 && self.p_context < 1.0) {
            errs.push(format!("sampler.p_context: {} is not in (0, 1)", self.p_context));
        }
        if !(self.p_target >= 0.0 && self.p_target < 1.0) {
            errs.push(format!("sampler.p_target: {} is not in [0, 1)", self.p_target));
        }
        if self.m_context == 0 {
            errs.push("sampler.m_context: must be >= 1".into());
        }
        if self.m_target == 0 {
            errs.push("sampler.m_target: must be >= 1".into());
        }
        if !(self.min_context_fraction > 0.0 && self.min_context_fraction < 1.0) {
            errs.push(format!("sampler.min_context_fraction: {} is not in (0, 1)", self.min_context_fraction));
        }
        if self.max_rounds == 0 {
            errs.push("sampler.max_rounds: must be >= 1".into());
        }
        errs
    }
}

/// Context indices and target blocks for one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSampling {
    /// Sorted, unique.
    pub context: Vec<usize>,
    /// One entry per target block; each entry is sorted.
    pub targets: Vec<Vec<usize>>,
    /// Size of the index space.
    pub n: usize,
}

impl BlockSampling {
    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn context_fraction(&self) -> f64 {
        self.context.len() as f64 / self.n as f64
    }

    /// Union of all target blocks, sorted.
    pub fn target_union(&self) -> Vec<usize> {
        let mut mask = vec![false; self.n];
        for b in &self.targets {
            for &i in b {
                mask[i] = true;
            }
        }
        (0..self.n).filter(|&i| mask[i]).collect()
    }

    pub fn target_fraction(&self) -> f64 {
        self.target_union().len() as f64 / self.n as f64
    }

    /// Checks ordering, range, disjointness and the context floor.
    pub fn check(&self, min_context_fraction: f64) -> std::result::Result<(), String> {
        if self.context.windows(2).any(|w| w[0] >= w[1]) {
            return Err("context indices not strictly increasing".into());
        }
        if self.context.iter().chain(self.targets.iter().flatten()).any(|&i| i >= self.n) {
            return Err("index out of range".into());
        }
        let mut is_target = vec![false; self.n];
        for &i in self.targets.iter().flatten() {
            is_target[i] = true;
        }
        if self.context.iter().any(|&i| is_target[i]) {
            return Err("context overlaps a target".into());
        }
        if (self.context.len() as f64) < min_context_fraction * self.n as f64 {
            return Err(format!("context fraction {} below floor {min_context_fraction}", self.context_fraction()));
        }
        Ok(())
    }
}

fn draw_starts(rng: &mut ChaCha8Rng, n: usize, m: usize, p: f64, rule: StartRule) -> Vec<usize> {
    let valid = n + 1 - m;
    match rule {
        StartRule::FixedCount => {
            let u: f64 = rng.gen();
            let k = ((p * n as f64 + u).floor() as usize).min(valid);
            let mut s = index::sample(rng, valid, k).into_vec();
            s.sort_unstable();
            s
        }
        StartRule::Bernoulli => (0..valid).filter(|_| rng.gen::<f64>() < p).collect(),
    }
}

/// Samples target blocks and a context block over `n` frames.
pub fn sample_blocks(n: usize, cfg: &SamplerConfig, seed: u64) -> Result<BlockSampling> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if n <= cfg.m_target || n <= cfg.m_context {
        return Err(Error::Sampling(format!(
            "sequence of {n} frames is too short for blocks of {} (context) and {} (target)",
            cfg.m_context, cfg.m_target
        )));
    }
    let mut rng = seed::rng(seed, &[seed::SAMPLER]);

    let starts = draw_starts(&mut rng, n, cfg.m_target, cfg.p_target, cfg.start_rule);
    let targets: Vec<Vec<usize>> = starts.iter().map(|&s| (s..s + cfg.m_target).collect()).collect();
    let mut is_target = vec![false; n];
    for &i in targets.iter().flatten() {
        is_target[i] = true;
    }

    let needed = cfg.min_context_fraction * n as f64;
    let available = is_target.iter().filter(|t| !**t).count();
    if (available as f64) < needed {
        return Err(Error::Sampling(format!(
            "targets leave {available} of {n} frames, fewer than the context floor of {needed}"
        )));
    }

    let mut is_context = vec![false; n];
    let mut count = 0usize;
    for _ in 0..cfg.max_rounds {
        for s in draw_starts(&mut rng, n, cfg.m_context, cfg.p_context, cfg.start_rule) {
            for i in s..s + cfg.m_context {
                if !is_target[i] && !is_context[i] {
                    is_context[i] = true;
                    count += 1;
                }
            }
        }
        if count as f64 >= needed {
            let context = (0..n).filter(|&i| is_context[i]).collect();
            return Ok(BlockSampling { context, targets, n });
        }
    }
    Err(Error::Sampling(format!("context floor not reached within {} rounds", cfg.max_rounds)))
}

/// One sampling over `n` frames replicated onto `channels` stacked copies of
/// the sequence: frame `i` of channel `c` is index `c*n + i`.
pub fn sample_blocks_shared(n: usize, channels: usize, cfg: &SamplerConfig, seed: u64) -> Result<BlockSampling> {
    if channels == 0 {
        return Err(Error::Sampling("channel count must be at least 1".into()));
    }
    let single = sample_blocks(n, cfg, seed)?;
    let replicate = |idx: &[usize]| -> Vec<usize> { (0..channels).flat_map(|c| idx.iter().map(move |&i| c * n + i)).collect() };
    Ok(BlockSampling {
        context: replicate(&single.context),
        targets: single.targets.iter().map(|b| replicate(b)).collect(),
        n: n * channels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// 2.5th percentile.
    pub lo: f64,
    /// 97.5th percentile.
    pub hi: f64,
}

impl Summary {
    /// Mean and central 95% interval (linear interpolation between order
    /// statistics).
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Summary { mean, lo: percentile(&v, 2.5), hi: percentile(&v, 97.5) }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Monte-Carlo coverage statistics, fractions in percent of `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub n: usize,
    pub trials: usize,
    pub context_percent: Summary,
    pub target_percent: Summary,
    pub target_blocks: Summary,
    /// Trials whose sampling returned an error.
    pub failed_trials: usize,
    /// Trials violating disjointness or the context floor.
    pub invariant_violations: usize,
}

pub fn coverage_stats(cfg: &SamplerConfig, n: usize, trials: usize, seed: u64) -> Result<CoverageStats> {
    if trials == 0 {
        return Err(Error::Sampling("trials must be at least 1".into()));
    }
    let results: Vec<Option<(f64, f64, f64, bool)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = sample_blocks(n, cfg, seed::derive(seed, &[seed::TRIAL, t as u64])).ok()?;
            let ok = s.check(cfg.min_context_fraction).is_ok();
            Some((100.0 * s.context_fraction(), 100.0 * s.target_fraction(), s.num_targets() as f64, ok))
        })
        .collect();
    let ok: Vec<_> = results.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::Sampling("every trial failed".into()));
    }
    let col = |f: fn(&(f64, f64, f64, bool)) -> f64| ok.iter().map(f).collect::<Vec<_>>();
    Ok(CoverageStats {
        n,
        trials,
        context_percent: Summary::of(&col(|r| r.0)),
        target_percent: Summary::of(&col(|r| r.1)),
        target_blocks: Summary::of(&col(|r| r.2)),
        failed_trials: trials - ok.len(),
        invariant_violations: ok.iter().filter(|r| !r.3).count(),
    })
}
