//! Strided temporal convolution stack that turns a raw crop into a frame
//! sequence.
//!
//! The default stack is the wav2vec 2.0 feature encoder with its last layer
//! removed: six 512-channel convolutions with strides `(5,2,2,2,2,2)` and
//! kernel widths `(10,3,3,3,3,2)`, for a total stride of 160 samples (10 ms
//! at 16 kHz) and a receptive field of 240 samples. A learned linear map
//! projects the conv channels to the model width.
//!
//! Activations are kept time-major (`frames x channels`), which makes the
//! first-layer group normalization (one group per channel) a normalization of
//! each column over time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::tape::{conv_out_len, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-channel group normalization with affine terms on the first layer.
    GroupFirst,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStackConfig {
    pub layers: Vec<ConvLayerSpec>,
    pub projection_dim: usize,
    pub normalization: Normalization,
    pub activation: Activation,
    pub conv_bias: bool,
}

impl ConvStackConfig {
    /// The 512-channel stack with a 768-wide projection.
    pub fn paper() -> Self {
        Self::with_channels(512, 768)
    }

    /// The default stride/kernel pattern with a different channel count.
    pub fn with_channels(channels: usize, projection_dim: usize) -> Self {
        let kernels = [10, 3, 3, 3, 3, 2];
        let strides = [5, 2, 2, 2, 2, 2];
        Self {
            layers: kernels.iter().zip(strides).map(|(&kernel, stride)| ConvLayerSpec { channels, kernel, stride }).collect(),
            projection_dim,
            normalization: Normalization::GroupFirst,
            activation: Activation::Gelu,
            conv_bias: false,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers.is_empty() {
            errs.push("layers: at least one convolution is required".to_string());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 {
                errs.push(format!("layers[{i}].stride: must be >= 1"));
            }
            if l.kernel < l.stride {
                errs.push(format!("layers[{i}].kernel: {} is smaller than stride {}", l.kernel, l.stride));
            }
            if l.channels == 0 {
                errs.push(format!("layers[{i}].channels: must be >= 1"));
            }
        }
        if self.projection_dim == 0 {
            errs.push("projection_dim: must be >= 1".to_string());
        }
        errs
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().rev().fold(1, |rf, l| (rf - 1) * l.stride + l.kernel)
    }

    /// Frames produced for `input_len` samples: `floor((L - k)/s) + 1` per layer.
    pub fn output_length(&self, input_len: usize) -> Result<usize> {
        let rf = self.receptive_field();
        self.layers
            .iter()
            .try_fold(input_len, |len, l| conv_out_len(len, l.kernel, l.stride))
            .ok_or(Error::TooShort { len: input_len, receptive_field: rf })
    }

    /// Samples needed for exactly `frames` output frames.
    pub fn input_length_for(&self, frames: usize) -> usize {
        self.receptive_field() + (frames.max(1) - 1) * self.total_stride()
    }
}

/// Frame sequence produced by the waveform encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveEmbedding {
    /// `N x D`
    pub frames: Tensor,
    pub frame_rate: f64,
    pub channel_tag: u8,
}

#[derive(Clone, Debug)]
struct ConvLayout {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    kernel: usize,
    stride: usize,
}

/// Parameter layout of one waveform encoder.
#[derive(Clone, Debug)]
pub struct WaveEncoder {
    config: ConvStackConfig,
    convs: Vec<ConvLayout>,
    proj_w: ParamId,
    proj_b: ParamId,
}

const GROUP_NORM_EPS: f64 = 1e-5;

impl WaveEncoder {
    /// Declares the parameters and draws their initial values.
    ///
    /// Convolutions use Kaiming-uniform fan-in initialization
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), the projection `N(0, 0.02)`,
    /// biases zero and normalization gains one.
    pub fn init(config: &ConvStackConfig, seed: u64, prefix: &str) -> Result<(Self, ParamStore)> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.into_iter().map(|e| format!("encoder.{e}")).collect()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 1;
        let mut convs = Vec::with_capacity(config.layers.len());
        for (i, l) in config.layers.iter().enumerate() {
            let fan_in = l.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_vec(fan_in, l.channels, (0..fan_in * l.channels).map(|_| rng.gen_range(-bound..bound)).collect());
            let weight = store.push(format!("{prefix}conv{i}.weight"), w, true);
            let bias = config.conv_bias.then(|| store.push(format!("{prefix}conv{i}.bias"), Tensor::zeros(1, l.channels), false));
            let norm = (i == 0 && config.normalization == Normalization::GroupFirst).then(|| {
                (
                    store.push(format!("{prefix}conv{i}.norm.gain"), Tensor::full(1, l.channels, 1.0), false),
                    store.push(format!("{prefix}conv{i}.norm.shift"), Tensor::zeros(1, l.channels), false),
                )
            });
            convs.push(ConvLayout { weight, bias, norm, kernel: l.kernel, stride: l.stride });
            cin = l.channels;
        }
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let d = config.projection_dim;
        let pw = Tensor::from_vec(cin, d, (0..cin * d).map(|_| normal.sample(&mut rng)).collect());
        let proj_w = store.push(format!("{prefix}proj.weight"), pw, true);
        let proj_b = store.push(format!("{prefix}proj.bias"), Tensor::zeros(1, d), false);
        Ok((Self { config: config.clone(), convs, proj_w, proj_b }, store))
    }

    pub fn config(&self) -> &ConvStackConfig {
        &self.config
    }

    /// Records the forward pass of `samples` on `tape`; returns the `N x D` frames.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, samples: &[f64]) -> Result<Var> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform encoder input"));
        }
        self.config.output_length(samples.len())?;
        let mut x = tape.constant(Tensor::from_vec(samples.len(), 1, samples.to_vec()));
        for c in &self.convs {
            x = tape.conv1d(x, params.get(c.weight), c.kernel, c.stride);
            if let Some(b) = c.bias {
                x = tape.add_row(x, params.get(b));
            }
            if let Some((g, s)) = c.norm {
                x = tape.norm_cols(x, GROUP_NORM_EPS);
                x = tape.mul_row(x, params.get(g));
                x = tape.add_row(x, params.get(s));
            }
            if self.config.activation == Activation::Gelu {
                x = tape.gelu(x);
            }
        }
        let y = tape.matmul(x, params.get(self.proj_w));
        Ok(tape.add_row(y, params.get(self.proj_b)))
    }

    /// Pure forward pass.
    pub fn encode(&self, params: &ParamStore, samples: &[f64], sample_rate: u32, channel_tag: u8) -> Result<WaveEmbedding> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, samples)?;
        Ok(WaveEmbedding {
            frames: tape.value(out).clone(),
            frame_rate: f64::from(sample_rate) / self.config.total_stride() as f64,
            channel_tag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stack_geometry() {
        let c = ConvStackConfig::paper();
        assert_eq!(c.total_stride(), 160);
        assert_eq!(c.receptive_field(), 240);
        assert_eq!(c.output_length(32000).unwrap(), 199);
        assert_eq!(c.output_length(32160).unwrap(), 200);
        assert_eq!(c.output_length(240).unwrap(), 1);
        assert!(matches!(c.output_length(239), Err(Error::TooShort { len: 239, receptive_field: 240 })));
        assert_eq!(c.input_length_for(20), 240 + 19 * 160);
    }

    #[test]
    fn layer_by_layer_recurrence() {
        // 240 -> 47 -> 23 -> 11 -> 5 -> 2 -> 1
        let c = ConvStackConfig::paper();
        let mut len = 240;
        let mut trace = vec![];
        for l in &c.layers {
            len = (len - l.kernel) / l.stride + 1;
            trace.push(len);
        }
        assert_eq!(trace, vec![47, 23, 11, 5, 2, 1]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ConvStackConfig::with_channels(4, 8);
        c.layers[2].kernel = 1;
        c.projection_dim = 0;
        let errs = c.validate();
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert!(WaveEncoder::init(&c, 0, "").is_err());
    }

    #[test]
    fn hand_computed_single_layer() {
        let cfg = ConvStackConfig {
            layers: vec![ConvLayerSpec { channels: 1, kernel: 2, stride: 2 }],
            projection_dim: 1,
            normalization: Normalization::None,
            activation: Activation::Identity,
            conv_bias: false,
        };
        let (enc, mut store) = WaveEncoder::init(&cfg, 0, "").unwrap();
        *store.get_mut(enc.convs[0].weight) = Tensor::from_vec(2, 1, vec![1.0, 1.0]);
        *store.get_mut(enc.proj_w) = Tensor::from_vec(1, 1, vec![1.0]);
        let out = enc.encode(&store, &[1.0, 2.0, 3.0, 4.0], 16000, 0).unwrap();
        assert_eq!(out.frames.data(), &[3.0, 7.0]);
        assert_eq!(out.frame_rate, 8000.0);
    }

    #[test]
    fn zero_input_gives_zero_frames() {
        let cfg = ConvStackConfig::with_channels(4, 6);
        let (enc, store) = WaveEncoder::init(&cfg, 3, "").unwrap();
        let out = enc.encode(&store, &vec![0.0; 400], 16000, 0).unwrap();
        assert_eq!(out.frames.shape(), (2, 6));
        assert!(out.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ConvStackConfig::with_channels(8, 16);
        let (_, a) = WaveEncoder::init(&cfg, 5, "").unwrap();
        let (_, b) = WaveEncoder::init(&cfg, 5, "").unwrap();
        let (_, c) = WaveEncoder::init(&cfg, 6, "").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let shapes: Vec<_> = a.params().iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
        assert_eq!(shapes[0], ("conv0.weight", (10, 8)));
        assert_eq!(shapes[1], ("conv0.norm.gain", (1, 8)));
        assert_eq!(shapes[3], ("conv1.weight", (24, 8)));
        assert_eq!(*shapes.last().unwrap(), ("proj.bias", (1, 16)));
    }

    #[test]
    fn rejects_non_finite_and_short_input() {
        let cfg = ConvStackConfig::with_channels(2, 2);
        let (enc, store) = WaveEncoder::init(&cfg, 0, "").unwrap();
        let mut x = vec![0.1; 300];
        x[7] = f64::NAN;
        assert!(matches!(enc.encode(&store, &x, 16000, 0), Err(Error::NonFinite(_))));
        assert!(matches!(enc.encode(&store, &[0.0; 10], 16000, 0), Err(Error::TooShort { .. })));
    }
}
