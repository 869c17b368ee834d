//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of every node that depends on a trainable leaf.
//! Constant leaves and [`Tape::detach`]ed nodes never receive gradient, which
//! is how the teacher path is kept out of the graph.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    /// Normalize each row over its columns. Keeps the normalized values and
    /// the per-row inverse standard deviation for the backward pass.
    NormRows { x: Var, inv_std: Vec<f64> },
    /// Normalize each column over its rows.
    NormCols { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Conv1d { x: Var, w: Var, kernel: usize, stride: usize },
    MeanRows(Var),
    Mse(Var, Var),
    Sum(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major `x` of shape `len x cin` into patches `lout x (kernel*cin)`.
/// Each patch is a contiguous slice of `x`, so this is a sequence of copies.
fn im2col(x: &Tensor, kernel: usize, stride: usize, lout: usize) -> Tensor {
    let cin = x.cols();
    let width = kernel * cin;
    let mut data = Vec::with_capacity(lout * width);
    for t in 0..lout {
        let start = t * stride * cin;
        data.extend_from_slice(&x.data()[start..start + width]);
    }
    Tensor::from_vec(lout, width, data)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel || stride == 0 {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = x.shape();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(r);
    for i in 0..r {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub(crate) fn normalize_cols(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = x.shape();
    let mean = x.mean_rows();
    let mut var = vec![0.0; c];
    for i in 0..r {
        for (j, v) in x.row(i).iter().enumerate() {
            let d = v - mean.data()[j];
            var[j] += d * d;
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / r as f64 + eps).sqrt()).collect();
    let mut out = x.clone();
    for i in 0..r {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean.data()[j]) * inv[j];
        }
    }
    (out, inv)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`, cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "add_row expects a 1 x cols row");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "mul_row expects a 1 x cols row");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, g) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x *= g;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (v, inv_std) = normalize_rows(self.value(a), eps);
        let rg = self.rg(a);
        self.push(v, Op::NormRows { x: a, inv_std }, rg)
    }

    pub fn norm_cols(&mut self, a: Var, eps: f64) -> Var {
        let (v, inv_std) = normalize_cols(self.value(a), eps);
        let rg = self.rg(a);
        self.push(v, Op::NormCols { x: a, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols(), "slice out of range");
        let mut data = Vec::with_capacity(x.rows() * width);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + width]);
        }
        let v = Tensor::from_vec(x.rows(), width, data);
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "row mismatch in concat_cols");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Valid (unpadded) strided convolution.
    ///
    /// `x` is `len x cin` (time-major), `w` is `(kernel*cin) x cout` with the
    /// row index `j*cin + ci` for tap `j` and input channel `ci`. The output
    /// is `lout x cout` with `lout = (len - kernel)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.rows(), kernel * xv.cols(), "conv weight rows must equal kernel*cin");
        let lout = conv_out_len(xv.rows(), kernel, stride).expect("input shorter than kernel");
        let patches = im2col(xv, kernel, stride, lout);
        let v = patches.matmul(wv);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv1d { x, w, kernel, stride }, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Mean over all elements of `(a - b)^2`, as a `1 x 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Sum(parts.to_vec()), rg)
    }

    /// Gradients of the `1 x 1` node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        gemm(1.0, &g, false, bv, false, 0.0, &mut ga);
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(1.0, &g, true, av, false, 0.0, &mut gb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        acc(&mut grads, *r, g.col_sums());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    if self.rg(*r) {
                        let mut gr = vec![0.0; rv.cols()];
                        for row in 0..g.rows() {
                            for ((o, gv), xv) in gr.iter_mut().zip(g.row(row)).zip(av.row(row)) {
                                *o += gv * xv;
                            }
                        }
                        acc(&mut grads, *r, Tensor::row_vector(gr));
                    }
                    if self.rg(*a) {
                        let mut ga = g;
                        for row in 0..ga.rows() {
                            for (x, s) in ga.row_mut(row).iter_mut().zip(rv.data()) {
                                *x *= s;
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::NormRows { x, inv_std } => {
                    let y = &node.value;
                    let c = y.cols() as f64;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] / c * (c * gv - sg - yv * sgy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::NormCols { x, inv_std } => {
                    let y = &node.value;
                    let n = y.rows() as f64;
                    let sg = g.col_sums();
                    let sgy = g.zip_map(y, |a, b| a * b).col_sums();
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[j] / n * (n * gr[j] - sg.data()[j] - yr[j] * sgy.data()[j]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, gv) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.rg(p) {
                            let cols = g.cols();
                            let part = Tensor::from_vec(r, cols, g.data()[off * cols..(off + r) * cols].to_vec());
                            acc(&mut grads, p, part);
                        }
                        off += r;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(g.rows() * w);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(&mut grads, p, Tensor::from_vec(g.rows(), w, data));
                        }
                        off += w;
                    }
                }
                Op::Conv1d { x, w, kernel, stride } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let lout = g.rows();
                    if self.rg(*w) {
                        let patches = im2col(xv, *kernel, *stride, lout);
                        let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                        gemm(1.0, &patches, true, &g, false, 0.0, &mut gw);
                        acc(&mut grads, *w, gw);
                    }
                    if self.rg(*x) {
                        let mut gp = Tensor::zeros(lout, wv.rows());
                        gemm(1.0, &g, false, wv, true, 0.0, &mut gp);
                        let cin = xv.cols();
                        let width = kernel * cin;
                        let mut gx = Tensor::zeros(xv.rows(), cin);
                        for t in 0..lout {
                            let start = t * stride * cin;
                            let dst = &mut gx.data_mut()[start..start + width];
                            for (o, v) in dst.iter_mut().zip(gp.row(t)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let s = 1.0 / av.rows() as f64;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (o, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = gv * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.scalar_value() / av.len() as f64;
                    let diff = av.zip_map(bv, |x, y| k * (x - y));
                    if self.rg(*b) {
                        acc(&mut grads, *b, diff.scale(-1.0));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, diff);
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.rg(p) {
                            acc(&mut grads, p, g.clone());
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}
