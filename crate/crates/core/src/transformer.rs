//! Pre-norm transformer encoder and fixed sinusoidal position tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    /// Time-only sinusoids for single-channel input.
    Sin1d,
    /// Half the width encodes time, half encodes the channel index.
    Sin2d,
}

impl PosScheme {
    pub fn channels(self) -> usize {
        match self {
            PosScheme::Sin1d => 1,
            PosScheme::Sin2d => 2,
        }
    }
}

/// `positions x width` table: first half `sin(p * w_i)`, second half
/// `cos(p * w_i)`, with `w_i = 10000^(-i/(width/2))`.
fn sincos(positions: impl Iterator<Item = f64>, width: usize) -> Vec<Vec<f64>> {
    let half = width / 2;
    positions
        .map(|p| {
            let mut row = vec![0.0; width];
            for i in 0..half {
                let w = 10000f64.powf(-(i as f64) / half as f64);
                row[i] = (p * w).sin();
                row[half + i] = (p * w).cos();
            }
            row
        })
        .collect()
}

/// Additive position table for `channels` stacked sequences of `frames` rows.
/// Row `c*frames + t` encodes frame `t` of channel `c`.
pub fn positional_embedding(frames: usize, channels: usize, width: usize, scheme: PosScheme) -> Result<Tensor> {
    if channels != scheme.channels() {
        return Err(Error::Shape(format!("{scheme:?} positional embedding needs {} channel(s), got {channels}", scheme.channels())));
    }
    match scheme {
        PosScheme::Sin1d => {
            if width % 2 != 0 {
                return Err(Error::Shape(format!("sin1d needs an even width, got {width}")));
            }
            Ok(Tensor::from_rows(&sincos((0..frames).map(|t| t as f64), width)))
        }
        PosScheme::Sin2d => {
            if width % 4 != 0 {
                return Err(Error::Shape(format!("sin2d splits the width into two even halves; {width} is not a multiple of 4")));
            }
            let half = width / 2;
            let time = sincos((0..frames).map(|t| t as f64), half);
            let chan = sincos((0..channels).map(|c| c as f64), half);
            let mut rows = Vec::with_capacity(frames * channels);
            for ch in &chan {
                for t in &time {
                    let mut r = t.clone();
                    r.extend_from_slice(ch);
                    rows.push(r);
                }
            }
            Ok(Tensor::from_rows(&rows))
        }
    }
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: NormIds,
    qkv: LinearIds,
    proj: LinearIds,
    ln2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

/// Declares parameters with a shared init scheme: linear weights `N(0, 0.02)`,
/// biases zero, norm gains one.
pub(crate) struct Declarer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
    pub prefix: String,
}

impl<'a> Declarer<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, prefix: &str) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: prefix.to_string() }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, decay: bool) -> ParamId {
        let d = Normal::new(0.0, std).expect("valid normal");
        let v = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(&mut self.rng)).collect());
        self.store.push(format!("{}{name}", self.prefix), v, decay)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.push(format!("{}{name}", self.prefix), Tensor::full(rows, cols, value), false)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds { w: self.normal(&format!("{name}.weight"), din, dout, 0.02, true), b: self.constant(&format!("{name}.bias"), 1, dout, 0.0) }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds { g: self.constant(&format!("{name}.gain"), 1, d, 1.0), b: self.constant(&format!("{name}.shift"), 1, d, 0.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

/// Layout of a stack of pre-norm transformer blocks with a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    shape: EncoderShape,
    blocks: Vec<BlockIds>,
    final_norm: Option<NormIds>,
}

pub struct EncoderOutput {
    /// Final normalized output (the input itself when depth is zero).
    pub out: Var,
    /// Residual stream after each block.
    pub layers: Vec<Var>,
}

fn linear(tape: &mut Tape, p: &Bound, l: &LinearIds, x: Var) -> Var {
    let y = tape.matmul(x, p.get(l.w));
    tape.add_row(y, p.get(l.b))
}

fn layer_norm(tape: &mut Tape, p: &Bound, n: &NormIds, x: Var) -> Var {
    let y = tape.norm_rows(x, LAYER_NORM_EPS);
    let y = tape.mul_row(y, p.get(n.g));
    tape.add_row(y, p.get(n.b))
}

impl Encoder {
    pub(crate) fn declare(shape: EncoderShape, d: &mut Declarer<'_>) -> Self {
        let w = shape.width;
        let blocks = (0..shape.depth)
            .map(|i| BlockIds {
                ln1: d.norm(&format!("block{i}.ln1"), w),
                qkv: d.linear(&format!("block{i}.qkv"), w, 3 * w),
                proj: d.linear(&format!("block{i}.proj"), w, w),
                ln2: d.norm(&format!("block{i}.ln2"), w),
                fc1: d.linear(&format!("block{i}.fc1"), w, shape.mlp_hidden),
                fc2: d.linear(&format!("block{i}.fc2"), shape.mlp_hidden, w),
            })
            .collect();
        let final_norm = (shape.depth > 0).then(|| d.norm("final_norm", w));
        Self { shape, blocks, final_norm }
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, b: &BlockIds, x: Var) -> Var {
        let w = self.shape.width;
        let h = self.shape.heads;
        let dh = w / h;
        let qkv = linear(tape, p, &b.qkv, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..h)
            .map(|i| {
                let q = tape.slice_cols(qkv, i * dh, dh);
                let k = tape.slice_cols(qkv, w + i * dh, dh);
                let v = tape.slice_cols(qkv, 2 * w + i * dh, dh);
                let s = tape.matmul_nt(q, k);
                let s = tape.scale(s, scale);
                let a = tape.softmax_rows(s);
                tape.matmul(a, v)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        linear(tape, p, &b.proj, cat)
    }

    /// Full self-attention over every row of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> EncoderOutput {
        let mut h = x;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n1 = layer_norm(tape, p, &b.ln1, h);
            let a = self.attention(tape, p, b, n1);
            h = tape.add(h, a);
            let n2 = layer_norm(tape, p, &b.ln2, h);
            let f = linear(tape, p, &b.fc1, n2);
            let f = tape.gelu(f);
            let f = linear(tape, p, &b.fc2, f);
            h = tape.add(h, f);
            layers.push(h);
        }
        let out = match &self.final_norm {
            Some(n) => layer_norm(tape, p, n, h),
            None => h,
        };
        EncoderOutput { out, layers }
    }
}

/// Predictor: maps context latents into its own width, appends mask tokens at
/// the target positions, runs a narrower encoder, and maps the mask rows back
/// to the encoder width.
#[derive(Clone, Debug)]
pub struct Predictor {
    encoder: Encoder,
    embed: LinearIds,
    mask_token: ParamId,
    head: LinearIds,
}

impl Predictor {
    pub(crate) fn declare(shape: EncoderShape, model_width: usize, d: &mut Declarer<'_>) -> Self {
        let embed = d.linear("embed", model_width, shape.width);
        let mask_token = d.normal("mask_token", 1, shape.width, 0.02, false);
        let encoder = Encoder::declare(shape, d);
        let head = d.linear("head", shape.width, model_width);
        Self { encoder, embed, mask_token, head }
    }

    pub fn width(&self) -> usize {
        self.encoder.shape.width
    }

    /// Context latents projected into predictor width, with positions added.
    pub fn embed_context(&self, tape: &mut Tape, p: &Bound, z: Var, context_pos: Var) -> Var {
        let e = linear(tape, p, &self.embed, z);
        tape.add(e, context_pos)
    }

    /// Predicts the encoder-width latents at the positions in `target_pos`
    /// (`M x predictor_width`), given embedded context tokens.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, ctx_tokens: Var, target_pos: Var) -> Var {
        let m = tape.value(target_pos).rows();
        let n = tape.value(ctx_tokens).rows();
        let masks = tape.add_row(target_pos, p.get(self.mask_token));
        let seq = tape.concat_rows(&[ctx_tokens, masks]);
        let out = self.encoder.forward(tape, p, seq).out;
        let idx: Vec<usize> = (n..n + m).collect();
        let rows = tape.gather_rows(out, &idx);
        linear(tape, p, &self.head, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin1d_rows_are_distinct() {
        let t = positional_embedding(10_000, 1, 16, PosScheme::Sin1d).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10_000);
        assert_eq!(t.row(0)[0], 0.0);
        assert_eq!(t.row(0)[8], 1.0);
    }

    #[test]
    fn sin2d_factorizes_time_and_channel() {
        let n = 50;
        let t = positional_embedding(n, 2, 16, PosScheme::Sin2d).unwrap();
        assert_eq!(t.shape(), (100, 16));
        for i in 0..n {
            assert_eq!(t.row(i)[..8], t.row(n + i)[..8]);
            assert_ne!(t.row(i)[8..], t.row(n + i)[8..]);
        }
    }

    #[test]
    fn scheme_and_width_errors() {
        assert!(positional_embedding(5, 2, 16, PosScheme::Sin1d).is_err());
        assert!(positional_embedding(5, 1, 16, PosScheme::Sin2d).is_err());
        assert!(positional_embedding(5, 2, 18, PosScheme::Sin2d).is_err());
        assert!(positional_embedding(5, 1, 7, PosScheme::Sin1d).is_err());
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let shape = EncoderShape { depth: 2, width: 8, heads: 2, mlp_hidden: 16 };
        let enc = Encoder::declare(shape, &mut Declarer::new(&mut store, 1, ""));
        let x = Tensor::from_vec(5, 8, (0..40).map(|v| (v as f64 * 0.37).sin()).collect());
        let perm = [3, 0, 4, 1, 2];
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x);
            let out = enc.forward(&mut tape, &p, xv).out;
            tape.value(out).clone()
        };
        let a = run(x.clone());
        let b = run(x.gather_rows(&perm));
        let ap = a.gather_rows(&perm);
        assert!(ap.sub(&b).max_abs() < 1e-12);
    }
}
