//! Context encoder, EMA target encoder, predictor and the latent regression loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::sampler::BlockSampling;
use crate::seed;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{positional_embedding, Declarer, Encoder, EncoderShape, PosScheme, Predictor};
use crate::wave_encoder::{ConvStackConfig, WaveEncoder};

/// Epsilon of the per-feature time normalization applied to target layers.
pub const TARGET_NORM_EPS: f64 = 1e-5;

const INIT_WAVE: u64 = 0x11;
const INIT_CONTEXT: u64 = 0x12;
const INIT_PREDICTOR: u64 = 0x13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub predictor_depth: usize,
    pub predictor_width: usize,
    pub predictor_heads: usize,
    pub positional_scheme: PosScheme,
}

impl TransformerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, n) in [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("predictor_depth", self.predictor_depth),
            ("predictor_width", self.predictor_width),
            ("predictor_heads", self.predictor_heads),
        ] {
            if n == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        if self.heads > 0 && self.width % self.heads != 0 {
            v.push(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.predictor_heads > 0 && self.predictor_width % self.predictor_heads != 0 {
            v.push(format!(
                "predictor_width {} is not divisible by predictor_heads {}",
                self.predictor_width, self.predictor_heads
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            v.push(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        let multiple = match self.positional_scheme {
            PosScheme::Sin1d => 2,
            PosScheme::Sin2d => 4,
        };
        for (name, w) in [("width", self.width), ("predictor_width", self.predictor_width)] {
            if w % multiple != 0 {
                v.push(format!("{name} {w} must be a multiple of {multiple} for {:?} positions", self.positional_scheme));
            }
        }
        v
    }

    fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    fn encoder_shape(&self) -> EncoderShape {
        EncoderShape { depth: self.depth, width: self.width, heads: self.heads, mlp_hidden: self.mlp_hidden(self.width) }
    }

    fn predictor_shape(&self) -> EncoderShape {
        EncoderShape {
            depth: self.predictor_depth,
            width: self.predictor_width,
            heads: self.predictor_heads,
            mlp_hidden: self.mlp_hidden(self.predictor_width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Number of final layers averaged into the regression target.
    pub top_k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub tau0: f64,
    pub tau_e: f64,
    pub tau_n: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self { tau0: 0.999, tau_e: 0.99999, tau_n: 100_000 }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 < self.tau0 && self.tau0 <= self.tau_e && self.tau_e < 1.0) {
            v.push(format!("need 0 < tau0 <= tau_e < 1, got tau0={} tau_e={}", self.tau0, self.tau_e));
        }
        if self.tau_n == 0 {
            v.push("tau_n must be at least 1".into());
        }
        v
    }

    /// Linear ramp from `tau0` to `tau_e` over `tau_n` steps, then constant.
    pub fn tau(&self, step: u64) -> f64 {
        if step >= self.tau_n {
            return self.tau_e;
        }
        let f = step as f64 / self.tau_n as f64;
        self.tau0 + (self.tau_e - self.tau0) * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: ConvStackConfig,
    pub transformer: TransformerConfig,
    pub target: TargetSpec,
    pub ema: EmaSchedule,
}

impl ModelConfig {
    /// Input channels: two for the binaural variant, one otherwise.
    pub fn channels(&self) -> usize {
        self.transformer.positional_scheme.channels()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v: Vec<String> = self.encoder.validate().into_iter().map(|e| format!("encoder: {e}")).collect();
        v.extend(self.transformer.validate().into_iter().map(|e| format!("transformer: {e}")));
        v.extend(self.ema.validate().into_iter().map(|e| format!("ema: {e}")));
        if self.encoder.projection_dim != self.transformer.width {
            v.push(format!(
                "encoder.projection_dim {} must equal transformer.width {}",
                self.encoder.projection_dim, self.transformer.width
            ));
        }
        if self.target.top_k == 0 || self.target.top_k > self.transformer.depth {
            v.push(format!("target.top_k {} must lie in 1..={}", self.target.top_k, self.transformer.depth));
        }
        v
    }
}

/// All trainable and EMA weights plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct JepaState {
    /// One store per waveform encoder.
    pub wave: Vec<ParamStore>,
    /// Context encoder weights θ.
    pub context: ParamStore,
    /// Target encoder weights Δ, same layout as `context`.
    pub target: ParamStore,
    /// Predictor weights including the mask embedding.
    pub predictor: ParamStore,
    pub step: u64,
}

impl JepaState {
    /// Trainable groups in a fixed order: waves, context, predictor.
    pub fn trainable(&self) -> Vec<&ParamStore> {
        self.wave.iter().chain([&self.context, &self.predictor]).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut ParamStore> {
        self.wave.iter_mut().chain([&mut self.context, &mut self.predictor]).collect()
    }

    /// Δ ← τΔ + (1 − τ)θ with τ taken at the current step, then advances the step.
    pub fn ema_update(&mut self, schedule: &EmaSchedule) -> f64 {
        let tau = schedule.tau(self.step);
        for (d, t) in self.target.params_mut().iter_mut().zip(self.context.params()) {
            for (dv, &tv) in d.value.data_mut().iter_mut().zip(t.value.data()) {
                *dv = tau * *dv + (1.0 - tau) * tv;
            }
        }
        self.step += 1;
        tau
    }
}

/// Gradients for the trainable groups of a [`JepaState`].
#[derive(Clone, Debug, PartialEq)]
pub struct JepaGrads {
    pub wave: Vec<ParamStore>,
    pub context: ParamStore,
    pub predictor: ParamStore,
}

impl JepaGrads {
    pub fn zeros_like(state: &JepaState) -> Self {
        Self {
            wave: state.wave.iter().map(ParamStore::zeros_like).collect(),
            context: state.context.zeros_like(),
            predictor: state.predictor.zeros_like(),
        }
    }

    pub fn groups(&self) -> Vec<&ParamStore> {
        self.wave.iter().chain([&self.context, &self.predictor]).collect()
    }

    pub fn add_assign(&mut self, other: &JepaGrads) {
        for (a, b) in self.wave.iter_mut().zip(&other.wave) {
            a.add_assign(b);
        }
        self.context.add_assign(&other.context);
        self.predictor.add_assign(&other.predictor);
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for w in &mut self.wave {
            w.scale_in_place(s);
        }
        self.context.scale_in_place(s);
        self.predictor.scale_in_place(s);
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.is_finite())
    }
}

/// Result of one instance's forward (and optional backward) pass.
#[derive(Clone, Debug)]
pub struct InstanceOutput {
    pub loss: f64,
    /// Regression targets over all frames.
    pub targets: Tensor,
    pub grads: Option<JepaGrads>,
}

/// Tape handles for one bound state.
pub struct BoundState {
    pub wave: Vec<Bound>,
    pub context: Bound,
    pub target: Bound,
    pub predictor: Bound,
}

/// Parameter layouts of the full model.
#[derive(Clone, Debug)]
pub struct JepaModel {
    config: ModelConfig,
    wave: Vec<WaveEncoder>,
    context: Encoder,
    predictor: Predictor,
}

impl JepaModel {
    /// Builds the layouts and a freshly initialized state with Δ = θ.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, JepaState)> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut wave = Vec::new();
        let mut wave_params = Vec::new();
        for c in 0..config.channels() {
            let (enc, store) = WaveEncoder::init(&config.encoder, seed::derive(seed, &[INIT_WAVE, c as u64]), &format!("wave{c}."))?;
            wave.push(enc);
            wave_params.push(store);
        }
        let t = &config.transformer;
        let mut context_params = ParamStore::new();
        let context = Encoder::declare(
            t.encoder_shape(),
            &mut Declarer::new(&mut context_params, seed::derive(seed, &[INIT_CONTEXT]), "context."),
        );
        let mut predictor_params = ParamStore::new();
        let predictor = Predictor::declare(
            t.predictor_shape(),
            t.width,
            &mut Declarer::new(&mut predictor_params, seed::derive(seed, &[INIT_PREDICTOR]), "predictor."),
        );
        let state = JepaState {
            wave: wave_params,
            target: context_params.clone(),
            context: context_params,
            predictor: predictor_params,
            step: 0,
        };
        Ok((Self { config: config.clone(), wave, context, predictor }, state))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.wave.len()
    }

    pub fn width(&self) -> usize {
        self.config.transformer.width
    }

    /// Frames per channel for a crop of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        self.config.encoder.output_length(samples)
    }

    /// Checks that `state` has the layout this model expects.
    pub fn check_state(&self, state: &JepaState) -> Result<()> {
        let (fresh_model, fresh) = Self::init(&self.config, 0)?;
        drop(fresh_model);
        let ok = state.wave.len() == fresh.wave.len()
            && state.wave.iter().zip(&fresh.wave).all(|(a, b)| a.same_layout(b))
            && state.context.same_layout(&fresh.context)
            && state.target.same_layout(&fresh.context)
            && state.predictor.same_layout(&fresh.predictor);
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter layout does not match the model configuration".into()))
        }
    }

    /// Binds every group; trainable groups become leaves only when `trainable`.
    /// Target weights are always bound as constants unless `target_leaves`.
    pub fn bind(&self, tape: &mut Tape, state: &JepaState, trainable: bool, target_leaves: bool) -> BoundState {
        BoundState {
            wave: state.wave.iter().map(|w| w.bind(tape, trainable)).collect(),
            context: state.context.bind(tape, trainable),
            target: state.target.bind(tape, target_leaves),
            predictor: state.predictor.bind(tape, trainable),
        }
    }

    /// Waveform embedding `w` of all channels stacked by rows, without positions.
    pub fn embed_waves(&self, tape: &mut Tape, bound: &BoundState, channels: &[Vec<f64>]) -> Result<Var> {
        if channels.len() != self.wave.len() {
            return Err(Error::Shape(format!("model expects {} channel(s), got {}", self.wave.len(), channels.len())));
        }
        let parts = channels
            .iter()
            .zip(self.wave.iter().zip(&bound.wave))
            .map(|(x, (enc, b))| enc.forward(tape, b, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) })
    }

    /// Adds the fixed position table in encoder width to stacked frames `w`.
    pub fn add_positions(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let rows = tape.value(w).rows();
        let pos = self.position_table(rows, self.width())?;
        let p = tape.constant(pos);
        Ok(tape.add(w, p))
    }

    fn position_table(&self, rows: usize, width: usize) -> Result<Tensor> {
        let ch = self.channels();
        positional_embedding(rows / ch, ch, width, self.config.transformer.positional_scheme)
    }

    /// Context encoder over the context rows of `w` only, in ascending index order.
    pub fn encode_context(&self, tape: &mut Tape, context_params: &Bound, w: Var, sampling: &BlockSampling) -> Result<Var> {
        if sampling.context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let rows = tape.value(w).rows();
        if sampling.n != rows || sampling.context.iter().any(|&i| i >= rows) {
            return Err(Error::Shape(format!("sampling over {} frames applied to {rows} rows", sampling.n)));
        }
        let wc = tape.gather_rows(w, &sampling.context);
        Ok(self.context.forward(tape, context_params, wc).out)
    }

    /// Predictions for target block `k` given context latents `z`.
    pub fn predict_targets(&self, tape: &mut Tape, predictor_params: &Bound, z: Var, sampling: &BlockSampling, k: usize) -> Result<Var> {
        let block = sampling
            .targets
            .get(k)
            .ok_or_else(|| Error::Sampling(format!("target block {k} out of {}", sampling.targets.len())))?;
        let table = self.position_table(sampling.n, self.predictor.width())?;
        let ctx_pos = tape.constant(table.gather_rows(&sampling.context));
        let tgt_pos = tape.constant(table.gather_rows(block));
        let tokens = self.predictor.embed_context(tape, predictor_params, z, ctx_pos);
        Ok(self.predictor.predict(tape, predictor_params, tokens, tgt_pos))
    }

    /// Averaged, time-normalized outputs of the last `top_k` target-encoder
    /// layers over every row of `w`. The result is detached.
    pub fn build_targets(&self, tape: &mut Tape, target_params: &Bound, w: Var) -> Var {
        let out = self.context.forward(tape, target_params, w);
        let k = self.config.target.top_k;
        let normed: Vec<Var> = out.layers[out.layers.len() - k..].iter().map(|&l| tape.norm_cols(l, TARGET_NORM_EPS)).collect();
        let sum = tape.sum(&normed);
        let avg = tape.scale(sum, 1.0 / k as f64);
        tape.detach(avg)
    }

    /// Context-encoder features of every frame, positions included.
    pub fn encode_full(&self, state: &JepaState, channels: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state, false, false);
        let w = self.embed_waves(&mut tape, &b, channels)?;
        let w = self.add_positions(&mut tape, w)?;
        let out = self.context.forward(&mut tape, &b.context, w).out;
        Ok(tape.value(out).clone())
    }

    /// Output of every target-encoder block over all frames, before any
    /// normalization.
    pub fn target_layers(&self, state: &JepaState, channels: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state, false, false);
        let w = self.embed_waves(&mut tape, &b, channels)?;
        let w = self.add_positions(&mut tape, w)?;
        let out = self.context.forward(&mut tape, &b.target, w);
        Ok(out.layers.iter().map(|&l| tape.value(l).clone()).collect())
    }

    /// Regression targets of every frame, as built during training.
    pub fn targets(&self, state: &JepaState, channels: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state, false, false);
        let w = self.embed_waves(&mut tape, &b, channels)?;
        let w = self.add_positions(&mut tape, w)?;
        let y = self.build_targets(&mut tape, &b.target, w);
        Ok(tape.value(y).clone())
    }

    /// Loss of one instance. With `fixed_targets`, those replace the target
    /// encoder output; with `with_grads`, gradients of every trainable group
    /// are returned.
    pub fn instance_forward(
        &self,
        state: &JepaState,
        channels: &[Vec<f64>],
        sampling: &BlockSampling,
        fixed_targets: Option<&Tensor>,
        with_grads: bool,
    ) -> Result<InstanceOutput> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state, with_grads, false);
        let w = self.embed_waves(&mut tape, &b, channels)?;
        let w = self.add_positions(&mut tape, w)?;
        let y = match fixed_targets {
            Some(t) => tape.constant(t.clone()),
            None => self.build_targets(&mut tape, &b.target, w),
        };
        let z = self.encode_context(&mut tape, &b.context, w, sampling)?;
        let preds = (0..sampling.num_targets())
            .map(|k| self.predict_targets(&mut tape, &b.predictor, z, sampling, k))
            .collect::<Result<Vec<_>>>()?;
        let loss = jepa_loss(&mut tape, &preds, y, sampling)?;
        let loss_value = tape.value(loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let targets = tape.value(y).clone();
        let grads = with_grads.then(|| {
            let mut g = tape.backward(loss);
            collect(state, &b, &mut g)
        });
        Ok(InstanceOutput { loss: loss_value, targets, grads })
    }
}

fn collect(state: &JepaState, b: &BoundState, g: &mut Gradients) -> JepaGrads {
    JepaGrads {
        wave: state.wave.iter().zip(&b.wave).map(|(s, bw)| s.collect_grads(bw, g)).collect(),
        context: state.context.collect_grads(&b.context, g),
        predictor: state.predictor.collect_grads(&b.predictor, g),
    }
}

/// Mean over target blocks of the per-element squared error between each
/// prediction and the target rows of its block.
pub fn jepa_loss(tape: &mut Tape, preds: &[Var], y: Var, sampling: &BlockSampling) -> Result<Var> {
    if preds.len() != sampling.targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} target blocks", preds.len(), sampling.targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::Sampling("no target blocks to predict".into()));
    }
    let width = tape.value(y).cols();
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, block) in preds.iter().zip(&sampling.targets) {
        if tape.value(p).shape() != (block.len(), width) {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match target block {}x{width}",
                tape.value(p).shape(),
                block.len()
            )));
        }
        let t = tape.gather_rows(y, block);
        terms.push(tape.mse(p, t));
    }
    let total = tape.sum(&terms);
    Ok(tape.scale(total, 1.0 / preds.len() as f64))
}

/// Tensor form of [`jepa_loss`].
pub fn jepa_loss_value(preds: &[Tensor], y: &Tensor, sampling: &BlockSampling) -> Result<f64> {
    let mut tape = Tape::new();
    let p: Vec<Var> = preds.iter().map(|t| tape.constant(t.clone())).collect();
    let yv = tape.constant(y.clone());
    let l = jepa_loss(&mut tape, &p, yv, sampling)?;
    Ok(tape.value(l).scalar_value())
}
