//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op appends one node; `backward` walks the nodes in exact reverse
//! order and accumulates gradients additively where a value fans out.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    Concat { parts: Vec<Var>, axis: usize },
    UpsampleNearest { x: Var, factor: usize },
    ChannelMul { x: Var, w: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T>, weights: Vec<T> },
    SmoothL1 { pred: Var, target: Vec<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Gradient for every parameter of `store`, zero where unused.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// Unfold one image `[C, H, W]` into `[C*KH*KW, OH*OW]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    let one = T::one();
    let s = if z >= T::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    };
    // keep the output strictly inside (0, 1)
    s.max(T::min_positive_value()).min(one - T::epsilon() * T::c(0.5))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input (data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// parameter used by several pathways is one value with one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let xs = self.value(x);
        let ws = self.value(w);
        if xs.ndim() != 4 || ws.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!("conv2d needs 4D tensors, got {:?} and {:?}", xs.shape(), ws.shape())));
        }
        let [n, c, h, wd] = xs.dims4();
        let [o, wc, kh, kw] = ws.dims4();
        if wc != c {
            return Err(Error::ShapeMismatch(format!("conv2d input has {c} channels, kernel expects {wc}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch(format!("conv2d bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::ShapeMismatch(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"))),
        };
        let p = oh * ow;
        let ckk = c * kh * kw;
        let mut out = vec![T::zero(); n * o * p];
        let xd = xs.data();
        let wdata = ws.data();
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        for ni in 0..n {
            let img = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
            let cols: Cow<[T]> = if direct {
                Cow::Borrowed(img)
            } else {
                Cow::Owned(im2col(img, c, h, wd, kh, kw, stride, pad, oh, ow))
            };
            let dst = &mut out[ni * o * p..(ni + 1) * o * p];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (oi, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(bias[oi]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(o, ckk, p, T::one(), wdata, (ckk, 1), &cols, (p, 1), beta, dst, (p, 1));
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 4 || k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("max_pool2d on {:?} with k={k} stride={stride}", xs.shape())));
        }
        let [n, c, h, w] = xs.dims4();
        if k > h || k > w {
            return Err(Error::ShapeMismatch(format!("pool kernel {k} larger than input {h}x{w}")));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = xs.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!("global_avg_pool needs NCHW, got {:?}", xs.shape())));
        }
        let [n, c, h, w] = xs.dims4();
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        // summing in sorted order makes the mean independent of pixel order
        let mut buf = Vec::with_capacity(hw);
        let out = xs
            .data()
            .chunks(hw)
            .map(|p| {
                buf.clear();
                buf.extend_from_slice(p);
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                buf.iter().copied().sum::<T>() * inv
            })
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Max over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!("global_max_pool needs NCHW, got {:?}", xs.shape())));
        }
        let [n, c, h, w] = xs.dims4();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (pi, p) in xs.data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            out.push(p[best]);
            argmax.push(pi * hw + best);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    /// `x [N, in] * W^T [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        if xs.ndim() != 2 || ws.ndim() != 2 || xs.shape()[1] != ws.shape()[1] {
            return Err(Error::ShapeMismatch(format!("linear: x {:?} vs W {:?}", xs.shape(), ws.shape())));
        }
        let (n, din) = (xs.shape()[0], xs.shape()[1]);
        let dout = ws.shape()[0];
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [dout] {
                return Err(Error::ShapeMismatch(format!("linear bias {:?} for {dout} outputs", bias.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, din, dout, T::one(), xs.data(), (din, 1), ws.data(), (1, din), beta, &mut out, (dout, 1));
        let value = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("relu preserves shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("sigmoid preserves shape");
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("scale preserves shape");
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} for rank {}", s0.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return Err(Error::ShapeMismatch(format!("concat: {:?} vs {:?} on axis {axis}", s, s0)));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 4 || factor == 0 {
            return Err(Error::InvalidArgument(format!("upsample {:?} by {factor}", xs.shape())));
        }
        let [n, c, h, w] = xs.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in xs.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(value, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// `x [N, C, ...] * w [N, C]`, broadcast over the trailing dims.
    pub fn channel_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.ndim() < 2 || ws.shape() != &xs.shape()[..2] {
            return Err(Error::ShapeMismatch(format!("channel_mul: x {:?} with weights {:?}", xs.shape(), ws.shape())));
        }
        let inner: usize = xs.shape()[2..].iter().product();
        let data = xs
            .data()
            .chunks(inner)
            .zip(ws.data())
            .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
            .collect();
        let value = Tensor::new(xs.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ChannelMul { x, w }, &[x, w]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Batch-mean cross-entropy of softmax(logits) against target distributions.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let ls = self.value(logits);
        if ls.ndim() != 2 || ls.shape() != targets.shape() {
            return Err(Error::ShapeMismatch(format!("softmax_cross_entropy: logits {:?} targets {:?}", ls.shape(), targets.shape())));
        }
        let (n, k) = (ls.shape()[0], ls.shape()[1]);
        for row in targets.data().chunks(k) {
            let s: f64 = row.iter().map(|v| v.f64()).sum();
            if row.iter().any(|v| *v < T::zero()) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("target row {row:?} is not a distribution")));
            }
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, t) in ls.data().chunks(k).zip(targets.data().chunks(k)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            for (&z, &ti) in row.iter().zip(t) {
                probs.push((z - lse).exp());
                if ti > T::zero() {
                    loss -= ti * (z - lse);
                }
            }
        }
        let value = Tensor::scalar(loss / T::c(n as f64));
        let op = Op::SoftmaxCrossEntropy { logits, probs, targets: targets.data().to_vec() };
        Ok(self.push(value, op, &[logits]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let ps = self.value(pred);
        if ps.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!("mse: {:?} vs {:?}", ps.shape(), target.shape())));
        }
        let s: T = ps.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(s / T::c(ps.len() as f64));
        Ok(self.push(value, Op::Mse { pred, target: target.data().to_vec() }, &[pred]))
    }

    /// `sum_i w_i * bce(sigmoid(z_i), t_i)`, computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let ls = self.value(logits);
        if ls.len() != targets.len() || ls.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce_with_logits: {} logits, {} targets, {} weights",
                ls.len(),
                targets.len(),
                weights.len()
            )));
        }
        let mut s = T::zero();
        for ((&z, &t), &w) in ls.data().iter().zip(targets).zip(weights) {
            if w != T::zero() {
                s += w * (z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p());
            }
        }
        let op = Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(s), op, &[logits]))
    }

    /// `sum_i w_i * smooth_l1(p_i - t_i)` with unit transition point.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let ps = self.value(pred);
        if ps.len() != target.len() || ps.len() != weights.len() {
            return Err(Error::ShapeMismatch("smooth_l1: length mismatch".into()));
        }
        let mut s = T::zero();
        for ((&p, &t), &w) in ps.data().iter().zip(target).zip(weights) {
            if w != T::zero() {
                s += w * smooth_l1(p - t);
            }
        }
        let op = Op::SmoothL1 { pred, target: target.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(s), op, &[pred]))
    }

    /// Fingerprint of every piecewise decision taken in the forward pass
    /// (ReLU signs, max-pool winners). Two evaluations with equal fingerprints
    /// lie on the same smooth piece of the function.
    pub fn decision_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::GlobalMaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar node. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let [n, c, h, wd] = xs.dims4();
                let [o, _, kh, kw] = ws.dims4();
                let [_, _, oh, ow] = g.dims4();
                let (p, ckk) = (oh * ow, c * kh * kw);
                let direct = kh == 1 && kw == 1 && *stride == 1 && *pad == 0;
                let mut dw = vec![T::zero(); o * ckk];
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xs.len()]);
                let mut dcols = vec![T::zero(); ckk * p];
                for ni in 0..n {
                    let gn = &gd[ni * o * p..(ni + 1) * o * p];
                    let img = &xs.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
                    if self.wants(*w) {
                        let cols: Cow<[T]> = if direct {
                            Cow::Borrowed(img)
                        } else {
                            Cow::Owned(im2col(img, c, h, wd, kh, kw, *stride, *pad, oh, ow))
                        };
                        T::gemm(o, p, ckk, T::one(), gn, (p, 1), &cols, (1, p), T::one(), &mut dw, (ckk, 1));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
                        if direct {
                            T::gemm(ckk, o, p, T::one(), ws.data(), (1, ckk), gn, (p, 1), T::one(), dst, (p, 1));
                        } else {
                            T::gemm(ckk, o, p, T::one(), ws.data(), (1, ckk), gn, (p, 1), T::zero(), &mut dcols, (p, 1));
                            col2im_add(&dcols, dst, c, h, wd, kh, kw, *stride, *pad, oh, ow);
                        }
                    }
                }
                if self.wants(*w) {
                    acc(grads, *w, Tensor::new(ws.shape().to_vec(), dw).expect("shape"));
                }
                if let Some(dx) = dx {
                    acc(grads, *x, Tensor::new(xs.shape().to_vec(), dx).expect("shape"));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for (k, row) in gd.chunks(p).enumerate() {
                            db[k % o] += row.iter().copied().sum::<T>();
                        }
                        acc(grads, *b, Tensor::new(vec![o], db).expect("shape"));
                    }
                }
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&a, &gv) in argmax.iter().zip(gd) {
                    d[a] += gv;
                }
                acc(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x);
                let [_, _, h, w] = xs.dims4();
                let inv = T::one() / T::c((h * w) as f64);
                let data = gd.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(h * w)).collect();
                acc(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, din) = (xs.shape()[0], xs.shape()[1]);
                let dout = ws.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), gd, (dout, 1), ws.data(), (din, 1), T::zero(), &mut dx, (din, 1));
                    acc(grads, *x, Tensor::new(vec![n, din], dx).expect("shape"));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, T::one(), gd, (1, dout), xs.data(), (din, 1), T::zero(), &mut dw, (din, 1));
                    acc(grads, *w, Tensor::new(vec![dout, din], dw).expect("shape"));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![dout], db).expect("shape"));
                }
            }
            Op::Relu { x } => {
                let xs = self.value(*x);
                let data = xs.data().iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                acc(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[i].value;
                let data = out.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                acc(grads, *x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        acc(grads, *v, g.clone());
                    }
                }
            }
            Op::Scale { x, s } => {
                let mut d = g.clone();
                d.scale_assign(*s);
                acc(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(grads, p, Tensor::new(ps, data).expect("shape"));
                    }
                    offset += chunk;
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let [_, _, h, w] = dx.dims4();
                let (oh, ow) = (h * factor, w * factor);
                for (dp, gp) in dx.data_mut().chunks_mut(h * w).zip(gd.chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dp[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ChannelMul { x, w } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let inner: usize = xs.shape()[2..].iter().product();
                if self.wants(*x) {
                    let data = gd
                        .chunks(inner)
                        .zip(ws.data())
                        .flat_map(|(gp, &s)| gp.iter().map(move |&v| v * s))
                        .collect();
                    acc(grads, *x, Tensor::new(xs.shape().to_vec(), data).expect("shape"));
                }
                if self.wants(*w) {
                    let data = gd
                        .chunks(inner)
                        .zip(xs.data().chunks(inner))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(grads, *w, Tensor::new(ws.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Sum { x } => {
                acc(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let shape = self.shape(*logits).to_vec();
                let scale = gd[0] / T::c(shape[0] as f64);
                let data = probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect();
                acc(grads, *logits, Tensor::new(shape, data).expect("shape"));
            }
            Op::Mse { pred, target } => {
                let ps = self.value(*pred);
                let scale = T::c(2.0) * gd[0] / T::c(ps.len() as f64);
                let data = ps.data().iter().zip(target).map(|(&p, &t)| (p - t) * scale).collect();
                acc(grads, *pred, Tensor::new(ps.shape().to_vec(), data).expect("shape"));
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let ls = self.value(*logits);
                let data = ls
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| if w == T::zero() { T::zero() } else { gd[0] * w * (sigmoid(z) - t) })
                    .collect();
                acc(grads, *logits, Tensor::new(ls.shape().to_vec(), data).expect("shape"));
            }
            Op::SmoothL1 { pred, target, weights } => {
                let ps = self.value(*pred);
                let data = ps
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &t), &w)| if w == T::zero() { T::zero() } else { gd[0] * w * smooth_l1_grad(p - t) })
                    .collect();
                acc(grads, *pred, Tensor::new(ps.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}

fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::c(0.5) * d * d
    } else {
        a - T::c(0.5)
    }
}

fn smooth_l1_grad<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}
