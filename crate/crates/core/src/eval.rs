//! Frozen-feature evaluation: clip embeddings, synthetic probe tasks, a
//! logistic-regression probe and the normalized benchmark score.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{instance_normalize, SoundClip};
use crate::jepa::{JepaModel, JepaState};
use crate::seed;
use crate::tensor::Tensor;

/// Mean-pooled context-encoder output of one clip, over all frames (and both
/// channels for the binaural model). Mono clips are duplicated for a
/// two-channel model. Each channel is normalized to zero mean and unit
/// variance first, as during training.
pub fn clip_features(model: &JepaModel, state: &JepaState, clip: &SoundClip) -> Result<Vec<f64>> {
    let clip = match (model.channels(), clip.num_channels()) {
        (2, 1) => clip.duplicated_to_stereo(),
        (1, 2) => {
            let ch = clip.channels();
            SoundClip::mono(ch[0].iter().zip(&ch[1]).map(|(a, b)| 0.5 * (a + b)).collect(), clip.sample_rate())?
        }
        _ => clip.clone(),
    };
    let mut channels = clip.into_channels();
    for c in &mut channels {
        instance_normalize(c);
    }
    let z = model.encode_full(state, &channels)?;
    Ok(z.mean_rows().into_vec())
}

/// Features for many clips, one row each, in input order.
pub fn extract_features(model: &JepaModel, state: &JepaState, clips: &[SoundClip]) -> Result<Tensor> {
    let rows = clips.par_iter().map(|c| clip_features(model, state, c)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, model.width()));
    }
    Ok(Tensor::from_rows(&rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Four pure-tone pitch classes under noise.
    Tone4,
    /// Amplitude- versus frequency-modulated carriers.
    AmVsFm,
    /// White, pink or brown noise.
    NoiseColor,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tone4" => Ok(TaskKind::Tone4),
            "am-vs-fm" | "am_vs_fm" => Ok(TaskKind::AmVsFm),
            "noise-color" | "noise_color" => Ok(TaskKind::NoiseColor),
            other => Err(Error::Probe(format!("unknown task {other:?} (tone4, am-vs-fm, noise-color)"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Tone4 => "tone4",
            TaskKind::AmVsFm => "am-vs-fm",
            TaskKind::NoiseColor => "noise-color",
        })
    }
}

impl TaskKind {
    pub fn label_space(self) -> Vec<String> {
        let v: &[&str] = match self {
            TaskKind::Tone4 => &["tone0", "tone1", "tone2", "tone3"],
            TaskKind::AmVsFm => &["am", "fm"],
            TaskKind::NoiseColor => &["white", "pink", "brown"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Base frequencies of the four tone classes, in Hz.
pub const TONE4_HZ: [f64; 4] = [220.0, 247.0, 277.0, 311.0];

/// Labeled clips with a train/test split.
#[derive(Clone, Debug)]
pub struct ProbeTask {
    pub clips: Vec<SoundClip>,
    pub labels: Vec<usize>,
    pub label_space: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        if self.clips.len() != self.labels.len() {
            return Err(Error::Probe("clip and label counts differ".into()));
        }
        if self.labels.iter().any(|&l| l >= self.label_space.len()) {
            return Err(Error::Probe("label outside the label space".into()));
        }
        let mut seen = vec![false; self.clips.len()];
        for &i in self.train.iter().chain(&self.test) {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Probe("train and test splits overlap or index out of range".into()));
            }
        }
        Ok(())
    }
}

/// One tone-class clip: a partial-rich tone with jittered pitch, random
/// phase and level, in white noise.
pub fn tone_clip(class: usize, seconds: f64, rate: u32, rng: &mut impl Rng) -> SoundClip {
    tone_clip_in_noise(class, seconds, rate, (0.3, 0.8), rng)
}

/// [`tone_clip`] with the noise standard deviation drawn from `noise`.
pub fn tone_clip_in_noise(class: usize, seconds: f64, rate: u32, noise: (f64, f64), rng: &mut impl Rng) -> SoundClip {
    let n = (seconds * rate as f64).round() as usize;
    let f0 = TONE4_HZ[class % 4] * (1.0 + rng.gen_range(-0.01..0.01));
    let amp = rng.gen_range(0.2..1.0);
    let phases: [f64; 3] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let noise = if noise.1 > noise.0 { rng.gen_range(noise.0..noise.1) } else { noise.0 };
    let x = (0..n)
        .map(|t| {
            let time = t as f64 / rate as f64;
            let tone: f64 = (0..3).map(|h| (2.0 * PI * f0 * (h + 1) as f64 * time + phases[h]).sin() / (h + 1) as f64).sum();
            let eps: f64 = StandardNormal.sample(rng);
            amp * tone + noise * eps
        })
        .collect();
    SoundClip::mono(x, rate).expect("finite synthesis")
}

/// A pretraining clip whose content changes over time: back-to-back
/// segments of 100 to 300 ms, each a tone of a random class or noise alone.
pub fn tone_sequence_clip(seconds: f64, rate: u32, rng: &mut impl Rng) -> SoundClip {
    let n = (seconds * rate as f64).round() as usize;
    let mut x = Vec::with_capacity(n);
    while x.len() < n {
        let len = ((rng.gen_range(0.1..0.3) * rate as f64) as usize).min(n - x.len()).max(1);
        let class = rng.gen_range(0..5);
        let seg = if class < 4 {
            tone_clip(class, len as f64 / rate as f64, rate, rng).into_channels().remove(0)
        } else {
            let g = rng.gen_range(0.3..0.8);
            (0..len).map(|_| g * { let e: f64 = StandardNormal.sample(rng); e }).collect::<Vec<f64>>()
        };
        x.extend(seg.into_iter().take(len));
    }
    x.truncate(n);
    SoundClip::mono(x, rate).expect("finite synthesis")
}

/// Unlabeled pretraining corpus of [`tone_sequence_clip`]s.
pub fn tone_corpus(clips: usize, seconds: f64, rate: u32, seed: u64) -> Vec<SoundClip> {
    (0..clips).map(|i| tone_sequence_clip(seconds, rate, &mut seed::rng(seed, &[seed::PROBE, 0xC0, i as u64]))).collect()
}

fn am_fm_clip(class: usize, seconds: f64, rate: u32, rng: &mut impl Rng) -> SoundClip {
    let n = (seconds * rate as f64).round() as usize;
    let fc = rng.gen_range(300.0..1500.0);
    let fm = rng.gen_range(3.0..12.0);
    let depth = rng.gen_range(0.5..0.9);
    let noise = rng.gen_range(0.05..0.3);
    let p0 = rng.gen_range(0.0..2.0 * PI);
    let x = (0..n)
        .map(|t| {
            let time = t as f64 / rate as f64;
            let s = if class == 0 {
                (1.0 + depth * (2.0 * PI * fm * time).sin()) * (2.0 * PI * fc * time + p0).sin()
            } else {
                let beta = depth * 0.1 * fc / fm;
                (2.0 * PI * fc * time + beta * (2.0 * PI * fm * time).sin() + p0).sin()
            };
            let eps: f64 = StandardNormal.sample(rng);
            s + noise * eps
        })
        .collect();
    SoundClip::mono(x, rate).expect("finite synthesis")
}

fn noise_color_clip(class: usize, seconds: f64, rate: u32, rng: &mut impl Rng) -> SoundClip {
    let n = (seconds * rate as f64).round() as usize;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let x = match class {
        0 => white,
        1 => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        _ => {
            let mut acc = 0.0;
            white
                .iter()
                .map(|&w| {
                    acc = 0.995 * acc + 0.1 * w;
                    acc
                })
                .collect()
        }
    };
    let gain = rng.gen_range(0.2..1.0);
    SoundClip::mono(x.into_iter().map(|v| v * gain).collect(), rate).expect("finite synthesis")
}

/// Generates a balanced task with `per_class` clips per label; half of each
/// class goes to training.
pub fn generate_task(kind: TaskKind, per_class: usize, seconds: f64, rate: u32, seed: u64) -> ProbeTask {
    let label_space = kind.label_space();
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..per_class {
        for class in 0..label_space.len() {
            let mut rng = seed::rng(seed, &[seed::PROBE, class as u64, i as u64]);
            let clip = match kind {
                TaskKind::Tone4 => tone_clip(class, seconds, rate, &mut rng),
                TaskKind::AmVsFm => am_fm_clip(class, seconds, rate, &mut rng),
                TaskKind::NoiseColor => noise_color_clip(class, seconds, rate, &mut rng),
            };
            if i % 2 == 0 {
                train.push(clips.len());
            } else {
                test.push(clips.len());
            }
            clips.push(clip);
            labels.push(class);
        }
    }
    ProbeTask { clips, labels, label_space, train, test }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    /// Stop when the gradient's largest entry falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-4, tol: 1e-6, max_iter: 100 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `(d + 1) x classes`, last row is the bias.
    weights: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn design(x: &Tensor, rows: &[usize], mean: &[f64], inv_std: &[f64]) -> DMatrix<f64> {
    let d = x.cols();
    DMatrix::from_fn(rows.len(), d + 1, |r, c| if c == d { 1.0 } else { (x.get(rows[r], c) - mean[c]) * inv_std[c] })
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut row in z.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl LinearProbe {
    /// Fits on rows `train` of `features` by damped Newton iterations with a
    /// backtracking line search. The objective is mean cross-entropy plus
    /// `l2/2` times the squared norm of all weights.
    pub fn fit(features: &Tensor, labels: &[usize], train: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Probe("empty training split".into()));
        }
        if classes < 2 {
            return Err(Error::Probe("need at least two classes".into()));
        }
        let first = labels[train[0]];
        if train.iter().all(|&i| labels[i] == first) {
            return Err(Error::Probe("training split contains a single class".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("probe features"));
        }
        let d = features.cols();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for &i in train {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v / n;
            }
        }
        for &i in train {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let x = design(features, train, &mean, &inv_std);
        let mut y = DMatrix::zeros(train.len(), classes);
        for (r, &i) in train.iter().enumerate() {
            y[(r, labels[i])] = 1.0;
        }
        let p_dim = (d + 1) * classes;
        let objective = |w: &DMatrix<f64>| {
            let mut z = &x * w;
            let mut nll = 0.0;
            for (r, mut row) in z.row_iter_mut().enumerate() {
                let m = row.max();
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let k = (0..classes).find(|&c| y[(r, c)] == 1.0).unwrap_or(0);
                nll += lse - row[k];
                row.fill(0.0);
            }
            nll / n + 0.5 * cfg.l2 * w.norm_squared()
        };
        let mut w = DMatrix::<f64>::zeros(d + 1, classes);
        let mut f = objective(&w);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iter {
            let mut p = &x * &w;
            softmax_rows(&mut p);
            let g = (x.transpose() * (&p - &y)) / n + &w * cfg.l2;
            if g.amax() < cfg.tol {
                converged = true;
                break;
            }
            iterations += 1;
            // Hessian blocks: (1/n) sum_r x_r x_r^T (p_a δ_ab - p_a p_b) + l2 I.
            let mut h = DMatrix::<f64>::zeros(p_dim, p_dim);
            for a in 0..classes {
                for b in a..classes {
                    let wts = DVector::from_fn(train.len(), |r, _| {
                        let pa = p[(r, a)];
                        (if a == b { pa } else { 0.0 }) - pa * p[(r, b)]
                    });
                    let xw = DMatrix::from_fn(train.len(), d + 1, |r, c| x[(r, c)] * wts[r]);
                    let block = x.transpose() * xw / n;
                    h.view_mut((a * (d + 1), b * (d + 1)), (d + 1, d + 1)).copy_from(&block);
                    if a != b {
                        h.view_mut((b * (d + 1), a * (d + 1)), (d + 1, d + 1)).copy_from(&block.transpose());
                    }
                }
            }
            for i in 0..p_dim {
                h[(i, i)] += cfg.l2;
            }
            let gv = DVector::from_fn(p_dim, |i, _| g[(i % (d + 1), i / (d + 1))]);
            let step = match h.cholesky() {
                Some(c) => c.solve(&gv),
                None => gv.clone(),
            };
            let dir = DMatrix::from_fn(d + 1, classes, |r, c| -step[c * (d + 1) + r]);
            let slope: f64 = g.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let cand = &w + &dir * t;
                let fc = objective(&cand);
                if fc <= f + 1e-4 * t * slope || t < 1e-10 {
                    w = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
        }
        Ok(Self { mean, inv_std, weights: w, iterations, converged })
    }

    pub fn predict(&self, features: &Tensor, rows: &[usize]) -> Vec<usize> {
        let z = design(features, rows, &self.mean, &self.inv_std) * &self.weights;
        z.row_iter().map(|r| r.transpose().argmax().0).collect()
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let pred = self.predict(features, rows);
        pred.iter().zip(rows).filter(|(p, &i)| **p == labels[i]).count() as f64 / rows.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits a probe on the task's training split and scores the test split.
pub fn train_probe(task: &ProbeTask, features: &Tensor, cfg: &ProbeConfig) -> Result<(LinearProbe, ProbeReport)> {
    task.validate()?;
    if task.test.is_empty() {
        return Err(Error::Probe("empty test split".into()));
    }
    if features.rows() != task.clips.len() {
        return Err(Error::Probe(format!("{} feature rows for {} clips", features.rows(), task.clips.len())));
    }
    let probe = LinearProbe::fit(features, &task.labels, &task.train, task.label_space.len(), cfg)?;
    let report = ProbeReport {
        task: String::new(),
        train_accuracy: probe.accuracy(features, &task.labels, &task.train),
        test_accuracy: probe.accuracy(features, &task.labels, &task.test),
        iterations: probe.iterations,
        converged: probe.converged,
    };
    Ok((probe, report))
}

/// Benchmark scores of several models over several tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    tasks: Vec<String>,
    models: Vec<String>,
    scores: HashMap<(String, String), f64>,
    baseline: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskContribution {
    pub task: String,
    pub score: f64,
    pub baseline: f64,
    pub sota: f64,
    /// Clamped `(score - baseline) / (sota - baseline)`, zero when the best
    /// model does not beat the baseline.
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub baseline: String,
    pub score: f64,
    pub tasks: Vec<TaskContribution>,
}

#[derive(Deserialize)]
struct ScoreRow {
    model: String,
    task: String,
    score: f64,
}

impl ScoreTable {
    /// Builds a table from `(model, task, score)` triples. Tasks and models
    /// keep first-appearance order.
    pub fn new(rows: impl IntoIterator<Item = (String, String, f64)>, baseline: &str) -> Result<Self> {
        let mut tasks = Vec::new();
        let mut models = Vec::new();
        let mut scores = HashMap::new();
        for (m, t, s) in rows {
            if !s.is_finite() {
                return Err(Error::ScoreTable(format!("non-finite score for {m} on {t}")));
            }
            if !tasks.contains(&t) {
                tasks.push(t.clone());
            }
            if !models.contains(&m) {
                models.push(m.clone());
            }
            if scores.insert((m.clone(), t.clone()), s).is_some() {
                return Err(Error::ScoreTable(format!("duplicate score for {m} on {t}")));
            }
        }
        if let Some(t) = tasks.iter().find(|t| !scores.contains_key(&(baseline.to_string(), (*t).clone()))) {
            return Err(Error::ScoreTable(format!("baseline {baseline:?} has no score for task {t:?}")));
        }
        Ok(Self { tasks, models, scores, baseline: baseline.to_string() })
    }

    /// Reads a CSV with header `model,task,score`.
    pub fn from_csv_reader(reader: impl std::io::Read, baseline: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let rows = rdr
            .deserialize::<ScoreRow>()
            .map(|r| r.map(|r| (r.model, r.task, r.score)).map_err(|e| Error::ScoreTable(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, baseline)
    }

    pub fn from_csv(path: impl AsRef<Path>, baseline: &str) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f, baseline)
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn baseline(&self) -> &str {
        &self.baseline
    }

    pub fn score(&self, model: &str, task: &str) -> Option<f64> {
        self.scores.get(&(model.to_string(), task.to_string())).copied()
    }

    /// Best score on `task` over every model in the table.
    pub fn sota(&self, task: &str) -> f64 {
        self.models.iter().filter_map(|m| self.score(m, task)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-task SOTA values keyed by task.
    pub fn sota_by_task(&self) -> BTreeMap<String, f64> {
        self.tasks.iter().map(|t| (t.clone(), self.sota(t))).collect()
    }
}

/// Mean over tasks of the clamped improvement over the baseline, relative to
/// the best model's improvement, times 100.
pub fn generalizability_score(table: &ScoreTable, model: &str) -> Result<ScoreReport> {
    if !table.models.iter().any(|m| m == model) {
        return Err(Error::ScoreTable(format!("model {model:?} is not in the table")));
    }
    let mut tasks = Vec::with_capacity(table.tasks.len());
    for t in &table.tasks {
        let score = table.score(model, t).ok_or_else(|| Error::ScoreTable(format!("{model:?} has no score for task {t:?}")))?;
        let baseline = table.score(&table.baseline, t).expect("checked at construction");
        let sota = table.sota(t);
        let contribution = if sota <= baseline { 0.0 } else { ((score - baseline) / (sota - baseline)).clamp(0.0, 1.0) };
        tasks.push(TaskContribution { task: t.clone(), score, baseline, sota, contribution });
    }
    let score = if tasks.is_empty() { 0.0 } else { 100.0 * tasks.iter().map(|c| c.contribution).sum::<f64>() / tasks.len() as f64 };
    Ok(ScoreReport { model: model.to_string(), baseline: table.baseline.clone(), score, tasks })
}
