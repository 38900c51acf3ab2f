//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] replays it once in reverse.
//! Operations check their outputs for NaN/Inf and fail instead of propagating.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Layout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a gathered element that reads as zero (padding).
pub(crate) const PAD_INDEX: usize = usize::MAX;

/// Zero padding applied around the spatial extents of a convolution input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn symmetric(p: usize) -> Self {
        Pad2d { top: p, bottom: p, left: p, right: p }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// Output that needs no gradient; saved values were dropped.
    Detached,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Gather { input: Var, index: Vec<usize> },
    Reshape(Var),
    Softmax { input: Var, len: usize, inner: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Sum(Var),
    Mean(Var),
    MeanAxis { input: Var, len: usize, inner: usize },
    SoftCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<T>, target_mass: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    replayed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

/// (outer, len, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batch count and per-batch matrix extents for a rank-2 or rank-3 operand.
fn mat_dims(shape: &[usize]) -> Option<(Option<usize>, usize, usize)> {
    match *shape {
        [r, c] => Some((None, r, c)),
        [b, r, c] => Some((Some(b), r, c)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for a later backward pass.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), recording: true, replayed: false }
    }

    /// A graph that evaluates without keeping anything needed for gradients.
    pub fn inference() -> Self {
        Graph { recording: false, ..Graph::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Detached };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(a).last().expect("rank >= 1");
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for last extent {c}", self.shape(bias)),
            ));
        }
        let (x, bv) = (self.value(a), self.value(bias).data());
        let data = x.data().iter().enumerate().map(|(i, &p)| p + bv[i % c]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Matrix product of rank-2 or batched rank-3 operands. One side may be
    /// unbatched, in which case it is shared by every batch of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = |d: String| Error::shape("matmul", d);
        let (ba, m, k) = mat_dims(&sa).ok_or_else(|| err(format!("lhs rank {}", sa.len())))?;
        let (bb, k2, n) = mat_dims(&sb).ok_or_else(|| err(format!("rhs rank {}", sb.len())))?;
        if k != k2 {
            return Err(err(format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => {
                return Err(err(format!("batch extents differ: {sa:?} x {sb:?}")))
            }
            (Some(x), _) | (_, Some(x)) => Some(x),
            (None, None) => None,
        };
        let nb = batch.unwrap_or(1);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); nb * m * n];
        let step_a = if ba.is_some() { m * k } else { 0 };
        let step_b = if bb.is_some() { k * n } else { 0 };
        let body = |(i, dst): (usize, &mut [T])| {
            kernels::gemm(
                dst,
                &xa[i * step_a..i * step_a + m * k],
                &xb[i * step_b..i * step_b + k * n],
                (m, k, n),
                Layout::NN,
            )
        };
        if nb > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(body);
        } else {
            out.chunks_mut(m * n).enumerate().for_each(body);
        }
        let shape = match batch {
            Some(b) => vec![b, m, n],
            None => vec![m, n],
        };
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Builds a tensor of `shape` whose i-th element is `input[index[i]]`, or zero
    /// where the index is [`PAD_INDEX`]. Backs every pure data-movement op.
    pub(crate) fn gather(&mut self, input: Var, shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        let src = self.value(input).data();
        debug_assert!(index.iter().all(|&i| i == PAD_INDEX || i < src.len()));
        let data = index
            .iter()
            .map(|&i| if i == PAD_INDEX { T::zero() } else { src[i] })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather { input, index }, &[input])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let mut in_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        for _ in 0..n {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(a, out_shape, index)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax over the last axis where entries with `keep[i] == false` get
    /// exactly zero weight, as if their score were −∞.
    pub fn softmax_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::shape("softmax", "mask length differs from input"));
        }
        let axis = self.shape(a).len() - 1;
        self.softmax_impl(a, axis, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let live = |j: usize| keep.map_or(true, |k| k[at(j)]);
                let mut max = T::neg_infinity();
                for j in (0..len).filter(|&j| live(j)) {
                    max = max.max(x[at(j)]);
                }
                if max == T::neg_infinity() {
                    return Err(Error::InvalidArgument("softmax row with every entry masked".into()));
                }
                let mut total = T::zero();
                for j in (0..len).filter(|&j| live(j)) {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        self.push("softmax", out, Op::Softmax { input: a, len, inner }, &[a])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument(format!("layer norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(a).to_vec();
        let c = *shape.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine parameter {:?} for last extent {c}", self.shape(p)),
                ));
            }
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / c;
        let cn = T::of(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, y)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { input: a, gamma, beta, xhat, rstd },
            &[a, gamma, beta],
        )
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.value(a).map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Cross-correlation of an N×C×H×W input with a C_out×C×k×k kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: Pad2d) -> Result<Var> {
        let err = |d: String| Error::shape("conv2d", d);
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let [n, c, h, w] = si[..] else { return Err(err(format!("input rank {}", si.len()))) };
        let [co, ci, k, k2] = sk[..] else { return Err(err(format!("kernel rank {}", sk.len()))) };
        if ci != c || k != k2 {
            return Err(err(format!("kernel {sk:?} for input {si:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        if k > ph || k > pw {
            return Err(err(format!("kernel {k} larger than padded input {ph}x{pw}")));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            top: pad.top,
            left: pad.left,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        };
        let (x, wk) = (self.value(input).data(), self.value(kernel).data());
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); n * co * ol];
        out.par_chunks_mut(co * ol).enumerate().for_each(|(b, dst)| {
            let mut cols = vec![T::zero(); pl * ol];
            kernels::im2col(&x[b * c * h * w..(b + 1) * c * h * w], &geom, &mut cols);
            kernels::gemm(dst, wk, &cols, (co, pl, ol), Layout::NN);
        });
        let out = Tensor::new(vec![n, co, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", out, Op::Conv2d { input, kernel, geom }, &[input, kernel])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Averages over `axis`, removing it from the shape (rank-1 inputs keep `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let ln = T::of(len as f64);
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    y[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        y.iter_mut().for_each(|v| *v /= ln);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, y)?;
        self.push("mean_axis", out, Op::MeanAxis { input: a, len, inner }, &[a])
    }

    /// Mean over the batch of `−Σ_k target_k · log softmax(logits)_k`.
    ///
    /// `targets` is a B×K constant whose rows must each sum to one (±1e-6).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, k] = shape[..] else {
            return Err(Error::shape("soft_cross_entropy", format!("logits rank {}", shape.len())));
        };
        if targets.shape() != shape.as_slice() {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("targets {:?} vs logits {shape:?}", targets.shape()),
            ));
        }
        let z = self.value(logits).data();
        let t = targets.data();
        let mut probs = vec![T::zero(); z.len()];
        let mut mass = vec![T::zero(); b];
        let mut loss = T::zero();
        for r in 0..b {
            let (zr, tr) = (&z[r * k..(r + 1) * k], &t[r * k..(r + 1) * k]);
            let total: T = tr.iter().copied().sum();
            if tr.iter().any(|&v| v < T::zero()) || (total - T::one()).abs().as_f64() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "target row {r} is not a probability vector (sum {total})"
                )));
            }
            let max = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + zr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let logp = zr[j] - lse;
                probs[r * k + j] = logp.exp();
                if tr[j] != T::zero() {
                    loss -= tr[j] * logp;
                }
            }
            mass[r] = total;
        }
        loss /= T::of(b as f64);
        let op = Op::SoftCrossEntropy {
            logits,
            probs,
            targets: t.to_vec(),
            target_mass: mass,
        };
        self.push("soft_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// `x · w + b` applied over the last axis of `x`, where `w` is in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cin = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / cin;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::shape("linear", format!("weight {ws:?} for input {shape:?}")));
        }
        let flat = self.reshape(x, vec![rows, cin])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, out_shape)
    }

    /// Reverse pass from a single-element `loss`. A graph can be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.replayed {
            return Err(Error::Autodiff(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must hold a single element, shape is {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        self.replayed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let mut send = |v: Var, contribution: Vec<T>| {
            debug_assert_eq!(contribution.len(), nodes[v.0].value.len());
            add_into(&mut grads[v.0], contribution);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        send(v, g.to_vec());
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*bias) {
                    let c = nodes[bias.0].value.len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    }
                    send(*bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    send(*a, g.iter().map(|&x| x * *f).collect());
                }
            }
            Op::Matmul(a, b) => {
                let (ba, m, k) = mat_dims(nodes[a.0].value.shape()).expect("validated");
                let (bb, _, n) = mat_dims(nodes[b.0].value.shape()).expect("validated");
                let nb = g.len() / (m * n);
                let (xa, xb) = (val(*a), val(*b));
                let step_a = if ba.is_some() { m * k } else { 0 };
                let step_b = if bb.is_some() { k * n } else { 0 };
                if wants(*a) {
                    let mut ga = vec![T::zero(); xa.len()];
                    if ba.is_some() {
                        ga.par_chunks_mut(m * k).enumerate().for_each(|(bi, dst)| {
                            let bsl = &xb[bi * step_b..bi * step_b + k * n];
                            kernels::gemm(dst, &g[bi * m * n..(bi + 1) * m * n], bsl, (m, n, k), Layout::NT);
                        });
                    } else {
                        for bi in 0..nb {
                            let bsl = &xb[bi * step_b..bi * step_b + k * n];
                            kernels::gemm(&mut ga, &g[bi * m * n..(bi + 1) * m * n], bsl, (m, n, k), Layout::NT);
                        }
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); xb.len()];
                    if bb.is_some() {
                        gb.par_chunks_mut(k * n).enumerate().for_each(|(bi, dst)| {
                            let asl = &xa[bi * step_a..bi * step_a + m * k];
                            kernels::gemm(dst, asl, &g[bi * m * n..(bi + 1) * m * n], (k, m, n), Layout::TN);
                        });
                    } else {
                        for bi in 0..nb {
                            let asl = &xa[bi * step_a..bi * step_a + m * k];
                            kernels::gemm(&mut gb, asl, &g[bi * m * n..(bi + 1) * m * n], (k, m, n), Layout::TN);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Gather { input, index } => {
                if wants(*input) {
                    let mut gx = vec![T::zero(); nodes[input.0].value.len()];
                    for (&src, &gv) in index.iter().zip(g) {
                        if src != PAD_INDEX {
                            gx[src] += gv;
                        }
                    }
                    send(*input, gx);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
            }
            Op::Softmax { input, len, inner } => {
                if wants(*input) {
                    let y = nodes[i].value.data();
                    let (len, inner) = (*len, *inner);
                    let outer = y.len() / (len * inner);
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + c;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    send(*input, gx);
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let c = nodes[gamma.0].value.len();
                let gm = val(*gamma);
                if wants(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                    send(*gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    }
                    send(*beta, gb);
                }
                if wants(*input) {
                    let cn = T::of(c as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<T> = (0..c).map(|j| gr[j] * gm[j]).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / cn;
                        let mean_dhh = dh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / cn;
                        for j in 0..c {
                            gx[r * c + j] = *rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    send(*input, gx);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    let half = T::of(0.5);
                    let gx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&gv, &x)| {
                            let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                            let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                            gv * (cdf + x * pdf)
                        })
                        .collect();
                    send(*a, gx);
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (x, wk) = (val(*input), val(*kernel));
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let co = nodes[kernel.0].value.shape()[0];
                let img = geom.channels * geom.height * geom.width;
                let n = x.len() / img;
                let g_of = |b: usize| &g[b * co * ol..(b + 1) * co * ol];
                if wants(*kernel) {
                    let partials: Vec<Vec<T>> = (0..n)
                        .into_par_iter()
                        .map(|b| {
                            let mut cols = vec![T::zero(); pl * ol];
                            kernels::im2col(&x[b * img..(b + 1) * img], geom, &mut cols);
                            let mut gw = vec![T::zero(); co * pl];
                            kernels::gemm(&mut gw, g_of(b), &cols, (co, ol, pl), Layout::NT);
                            gw
                        })
                        .collect();
                    let mut gw = vec![T::zero(); wk.len()];
                    for p in partials {
                        gw.iter_mut().zip(p).for_each(|(s, v)| *s += v);
                    }
                    send(*kernel, gw);
                }
                if wants(*input) {
                    let mut gx = vec![T::zero(); x.len()];
                    gx.par_chunks_mut(img).enumerate().for_each(|(b, dst)| {
                        let mut cols = vec![T::zero(); pl * ol];
                        kernels::gemm(&mut cols, wk, g_of(b), (pl, co, ol), Layout::TN);
                        kernels::col2im(&cols, geom, dst);
                    });
                    send(*input, gx);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    send(*a, vec![g[0]; nodes[a.0].value.len()]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = nodes[a.0].value.len();
                    send(*a, vec![g[0] / T::of(n as f64); n]);
                }
            }
            Op::MeanAxis { input, len, inner } => {
                if wants(*input) {
                    let (len, inner) = (*len, *inner);
                    let ln = T::of(len as f64);
                    let n = nodes[input.0].value.len();
                    let mut gx = vec![T::zero(); n];
                    for (idx, slot) in gx.iter_mut().enumerate() {
                        let o = idx / (len * inner);
                        let c = idx % inner;
                        *slot = g[o * inner + c] / ln;
                    }
                    send(*input, gx);
                }
            }
            Op::SoftCrossEntropy { logits, probs, targets, target_mass } => {
                if wants(*logits) {
                    let k = probs.len() / target_mass.len();
                    let scale = g[0] / T::of(target_mass.len() as f64);
                    let gx = probs
                        .iter()
                        .zip(targets)
                        .enumerate()
                        .map(|(idx, (&p, &t))| scale * (p * target_mass[idx / k] - t))
                        .collect();
                    send(*logits, gx);
                }
            }
        }
    }
}
