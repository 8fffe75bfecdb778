//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse. Nodes that do not depend on a trainable leaf
//! are never differentiated.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::NnError;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const IN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Affine(Var, T),
    Add(Var, Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    MeanAbsDiff(Var, Var),
    MseConst(Var, T),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u32>,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    LinComb(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass and its reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf (data, frozen weights).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Zero-padded convolution; weight `[cout, cin, k, k]`, bias `[cout, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NnError> {
        let [n, cin, h, wd] = self.value(x).shape();
        let [cout, wcin, k, k2] = self.value(w).shape();
        if wcin != cin || k != k2 {
            return Err(NnError::Shape(format!(
                "conv2d: input {:?} vs weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv2d: {h}x{wd} input too small for kernel {k}")))?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros([n, cout, geom.oh, geom.ow]);
        let identity = geom.is_identity();
        let mut cols = if identity { Vec::new() } else { vec![T::zero(); n * rows * ncols] };
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for i in 0..n {
                let col: &[T] = if identity {
                    xv.sample(i)
                } else {
                    let c = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
                    im2col(&geom, xv.sample(i), c);
                    c
                };
                let o = out.sample_mut(i);
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (co, chunk) in o.chunks_mut(ncols).enumerate() {
                        chunk.fill(bv[co]);
                    }
                    gemm(false, false, cout, ncols, rows, wv, col, T::one(), o);
                } else {
                    gemm(false, false, cout, ncols, rows, wv, col, T::zero(), o);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// Transposed convolution; weight `[cin, cout, k, k]`.
    /// Output side is `(h-1)·stride - 2·pad + k + out_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var, NnError> {
        let [n, cin, h, wd] = self.value(x).shape();
        let [wcin, cout, k, k2] = self.value(w).shape();
        if wcin != cin || k != k2 || out_pad >= stride.max(1) {
            return Err(NnError::Shape(format!(
                "conv_transpose2d: input {:?} vs weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let full_h = (h - 1) * stride + k + out_pad;
        let full_w = (wd - 1) * stride + k + out_pad;
        if full_h < 2 * pad + 1 || full_w < 2 * pad + 1 {
            return Err(NnError::Shape("conv_transpose2d: padding exceeds output".into()));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| NnError::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        let rows = geom.col_rows();
        let plane = h * wd;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = vec![T::zero(); rows * plane];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for i in 0..n {
                // cols (cout·k·k × h·w) = Wᵀ · x
                gemm(true, false, rows, plane, cin, wv, xv.sample(i), T::zero(), &mut cols);
                let o = out.sample_mut(i);
                col2im(&geom, &cols, o);
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (co, chunk) in o.chunks_mut(oh * ow).enumerate() {
                        for v in chunk {
                            *v += bv[co];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var, NnError> {
        let [n, c, h, w] = self.value(x).shape();
        if pad >= h || pad >= w {
            return Err(NnError::Shape(format!("reflect_pad: pad {pad} needs input larger than {h}x{w}")));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        let xv = self.value(x);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * ph * pw..(p + 1) * ph * pw];
            for y in 0..ph {
                let sy = reflect(y as isize - pad as isize, h);
                let srow = &s[sy * w..(sy + 1) * w];
                let drow = &mut d[y * pw..(y + 1) * pw];
                drow[pad..pad + w].copy_from_slice(srow);
                for i in 0..pad {
                    drow[i] = srow[reflect(i as isize - pad as isize, w)];
                    drow[pad + w + i] = srow[reflect((w + i) as isize, w)];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad { x, pad }, rg))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let hw = h * w;
        let inv_hw = T::of(1.0 / hw as f64);
        let eps = T::of(IN_EPS);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::of(scale), T::of(shift));
        let out = self.value(x).map(|v| a * v + b);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let [n, ca, h, w] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape("concat: batch/spatial mismatch".into()));
        }
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        for i in 0..n {
            let o = out.sample_mut(i);
            o[..ca * h * w].copy_from_slice(self.nodes[a.0].value.sample(i));
            o[ca * h * w..].copy_from_slice(self.nodes[b.0].value.sample(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let [n, c, h, w] = self.value(x).shape();
        if start + len > c || len == 0 {
            return Err(NnError::Shape(format!("slice_channels: {start}+{len} of {c}")));
        }
        let mut out = Tensor::zeros([n, len, h, w]);
        for i in 0..n {
            out.sample_mut(i)
                .copy_from_slice(&self.nodes[x.0].value.sample(i)[start * h * w..(start + len) * h * w]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    /// `mean |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "mean_abs_diff: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / T::of(av.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), rg))
    }

    /// `mean (x - target)²` against a constant target.
    pub fn mse_const(&mut self, x: Var, target: f64) -> Var {
        let t = T::of(target);
        let xv = self.value(x).data();
        let s: T = xv.iter().map(|&v| (v - t) * (v - t)).sum();
        let out = Tensor::scalar(s / T::of(xv.len() as f64));
        let rg = self.rg(x);
        self.push(out, Op::MseConst(x, t), rg)
    }

    /// Per-pixel softmax cross-entropy averaged over all pixels.
    /// `labels` holds one class index per `(n, y, x)` in NHW order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<u32>) -> Result<Var, NnError> {
        let [n, k, h, w] = self.value(logits).shape();
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(NnError::Shape(format!(
                "softmax_cross_entropy: {} labels for {} pixels",
                labels.len(),
                n * hw
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(NnError::Shape(format!("softmax_cross_entropy: label {bad} >= {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k * hw];
        let mut loss = T::zero();
        for i in 0..n {
            let src = lv.sample(i);
            let dst = &mut probs[i * k * hw..(i + 1) * k * hw];
            for p in 0..hw {
                let mut m = src[p];
                for c in 1..k {
                    m = m.max(src[c * hw + p]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (src[c * hw + p] - m).exp();
                    dst[c * hw + p] = e;
                    z += e;
                }
                for c in 0..k {
                    dst[c * hw + p] = dst[c * hw + p] / z;
                }
                let l = labels[i * hw + p] as usize;
                loss += z.ln() + m - src[l * hw + p];
            }
        }
        let out = Tensor::scalar(loss / T::of((n * hw) as f64));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftmaxCe { logits, probs, labels }, rg))
    }

    /// L1 over the pixels selected by `mask` (NHW order, shared by all
    /// channels), averaged over selected pixel-channels. Zero when nothing is
    /// selected.
    pub fn masked_l1(&mut self, pred: Var, target: Tensor<T>, mask: Vec<bool>) -> Result<Var, NnError> {
        let shape = self.value(pred).shape();
        let [n, c, h, w] = shape;
        if target.shape() != shape || mask.len() != n * h * w {
            return Err(NnError::Shape("masked_l1: shape mismatch".into()));
        }
        let hw = h * w;
        let count = mask.iter().filter(|&&m| m).count();
        let pv = self.value(pred);
        let mut s = T::zero();
        for i in 0..n {
            let ps = pv.sample(i);
            let ts = target.sample(i);
            for p in 0..hw {
                if mask[i * hw + p] {
                    for ch in 0..c {
                        s += (ps[ch * hw + p] - ts[ch * hw + p]).abs();
                    }
                }
            }
        }
        let denom = (count * c).max(1);
        let out = Tensor::scalar(s / T::of(denom as f64));
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::MaskedL1 {
                pred,
                target: target.into_data(),
                mask,
                count,
            },
            rg,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = T::zero();
        let mut rg = false;
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, c)| (v, T::of(c))).collect();
        for &(v, c) in &terms {
            s += c * self.scalar(v);
            rg |= self.rg(v);
        }
        self.push(Tensor::scalar(s), Op::LinComb(terms), rg)
    }

    /// Reverse sweep from scalar `loss`. Gradients of every node reachable
    /// from a trainable leaf become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward target must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `f(index)` elementwise into the gradient slot of `v`.
    fn acc_with(grads: &mut [Option<Tensor<T>>], shape: [usize; 4], v: Var, f: impl Fn(usize) -> T) {
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (i, g) in slot.data_mut().iter_mut().enumerate() {
            *g += f(i);
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &Tensor<T>) {
        // Temporarily move the op out so node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => self.back_conv(*x, *w, *b, geom, cols, gout),
            Op::ConvTranspose { x, w, b, geom } => self.back_conv_t(*x, *w, *b, geom, gout),
            Op::ReflectPad { x, pad } => {
                if self.rg(*x) {
                    let [n, c, h, w] = self.value(*x).shape();
                    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    let src = gout.data();
                    let dst = gx.data_mut();
                    for p in 0..n * c {
                        let s = &src[p * ph * pw..(p + 1) * ph * pw];
                        let d = &mut dst[p * h * w..(p + 1) * h * w];
                        for y in 0..ph {
                            let sy = reflect(y as isize - *pad as isize, h);
                            for xx in 0..pw {
                                let sx = reflect(xx as isize - *pad as isize, w);
                                d[sy * w + sx] += s[y * pw + xx];
                            }
                        }
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if self.rg(*x) {
                    let [n, c, h, w] = gout.shape();
                    let hw = h * w;
                    let inv_hw = T::of(1.0 / hw as f64);
                    let y = self.nodes[i].value.data();
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for (p, (gxp, (gp, yp))) in gx
                        .data_mut()
                        .chunks_mut(hw)
                        .zip(gout.data().chunks(hw).zip(y.chunks(hw)))
                        .enumerate()
                    {
                        let mg = gp.iter().copied().sum::<T>() * inv_hw;
                        let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                        let is = inv_std[p];
                        for ((o, &gv), &yv) in gxp.iter_mut().zip(gp).zip(yp) {
                            *o = is * (gv - mg - yv * mgy);
                        }
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::Relu(x) => {
                let y = self.nodes[i].value.data();
                let g = gout.data();
                Self::acc_with(&mut self.grads, gout.shape(), *x, |k| if y[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.nodes[x.0].value.data();
                let g = gout.data();
                let s = *s;
                Self::acc_with(&mut self.grads, gout.shape(), *x, |k| if xv[k] > T::zero() { g[k] } else { g[k] * s });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let g = gout.data();
                Self::acc_with(&mut self.grads, gout.shape(), *x, |k| g[k] * (T::one() - y[k] * y[k]));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let g = gout.data();
                Self::acc_with(&mut self.grads, gout.shape(), *x, |k| g[k] * y[k] * (T::one() - y[k]));
            }
            Op::Affine(x, a) => {
                let g = gout.data();
                let a = *a;
                Self::acc_with(&mut self.grads, gout.shape(), *x, |k| g[k] * a);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(*a, gout.clone());
                }
                if self.rg(*b) {
                    self.accumulate(*b, gout.clone());
                }
            }
            Op::Concat(a, b) => {
                let [n, _, h, w] = gout.shape();
                let ca = self.value(*a).c();
                let cb = self.value(*b).c();
                if self.rg(*a) {
                    let mut ga = Tensor::zeros([n, ca, h, w]);
                    for s in 0..n {
                        ga.sample_mut(s).copy_from_slice(&gout.sample(s)[..ca * h * w]);
                    }
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros([n, cb, h, w]);
                    for s in 0..n {
                        gb.sample_mut(s).copy_from_slice(&gout.sample(s)[ca * h * w..]);
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::SliceChannels { x, start } => {
                if self.rg(*x) {
                    let shape = self.value(*x).shape();
                    let [n, _, h, w] = shape;
                    let len = gout.c();
                    let mut gx = Tensor::zeros(shape);
                    for s in 0..n {
                        gx.sample_mut(s)[start * h * w..(start + len) * h * w].copy_from_slice(gout.sample(s));
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let g = gout.item();
                let shape = self.nodes[a.0].value.shape();
                let (ra, rb) = (self.rg(*a), self.rg(*b));
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let scale = g / T::of(av.len() as f64);
                let sign = |k: usize| {
                    let d = av[k] - bv[k];
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if ra {
                    Self::acc_with(&mut self.grads, shape, *a, sign);
                }
                if rb {
                    Self::acc_with(&mut self.grads, shape, *b, |k| -sign(k));
                }
            }
            Op::MseConst(x, t) => {
                let g = gout.item();
                let shape = self.nodes[x.0].value.shape();
                let xv = self.nodes[x.0].value.data();
                let scale = T::of(2.0) * g / T::of(xv.len() as f64);
                let t = *t;
                Self::acc_with(&mut self.grads, shape, *x, |k| scale * (xv[k] - t));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let [n, k, h, w] = self.value(*logits).shape();
                let hw = h * w;
                let scale = gout.item() / T::of((n * hw) as f64);
                let mut gl = Tensor::from_vec([n, k, h, w], probs.clone());
                for s in 0..n {
                    let d = gl.sample_mut(s);
                    for p in 0..hw {
                        d[labels[s * hw + p] as usize * hw + p] -= T::one();
                    }
                }
                for v in gl.data_mut() {
                    *v *= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                count,
            } => {
                let shape = self.nodes[pred.0].value.shape();
                let [_, c, h, w] = shape;
                let hw = h * w;
                let scale = gout.item() / T::of(((*count) * c).max(1) as f64);
                let pv = self.nodes[pred.0].value.data();
                Self::acc_with(&mut self.grads, shape, *pred, |idx| {
                    let s = idx / (c * hw);
                    let p = idx % hw;
                    if !mask[s * hw + p] {
                        return T::zero();
                    }
                    let d = pv[idx] - target[idx];
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
            }
            Op::LinComb(terms) => {
                let g = gout.item();
                for &(v, c) in terms {
                    if self.rg(v) {
                        self.accumulate(v, Tensor::scalar(g * c));
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn back_conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, cols: &[T], gout: &Tensor<T>) {
        let n = gout.n();
        let cout = gout.c();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = Tensor::zeros([cout, 1, 1, 1]);
                for s in 0..n {
                    for (co, chunk) in gout.sample(s).chunks(ncols).enumerate() {
                        gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
                    }
                }
                self.accumulate(b, gb);
            }
        }
        if self.rg(w) {
            let mut gw = Tensor::zeros(self.value(w).shape());
            for s in 0..n {
                let col: &[T] = if geom.is_identity() {
                    self.nodes[x.0].value.sample(s)
                } else {
                    &cols[s * rows * ncols..(s + 1) * rows * ncols]
                };
                // gW (cout × rows) += gout (cout × ncols) · colᵀ
                gemm(false, true, cout, rows, ncols, gout.sample(s), col, T::one(), gw.data_mut());
            }
            self.accumulate(w, gw);
        }
        if self.rg(x) {
            let mut gx = Tensor::zeros(self.value(x).shape());
            let mut dcols = vec![T::zero(); rows * ncols];
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                if geom.is_identity() {
                    gemm(true, false, rows, ncols, cout, wv, gout.sample(s), T::zero(), gx.sample_mut(s));
                } else {
                    gemm(true, false, rows, ncols, cout, wv, gout.sample(s), T::zero(), &mut dcols);
                    col2im(geom, &dcols, gx.sample_mut(s));
                }
            }
            self.accumulate(x, gx);
        }
    }

    fn back_conv_t(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, gout: &Tensor<T>) {
        let n = gout.n();
        let cout = gout.c();
        let cin = self.value(x).c();
        let rows = geom.col_rows();
        let plane = geom.col_cols();
        let oplane = geom.h * geom.w;
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = Tensor::zeros([cout, 1, 1, 1]);
                for s in 0..n {
                    for (co, chunk) in gout.sample(s).chunks(oplane).enumerate() {
                        gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
                    }
                }
                self.accumulate(b, gb);
            }
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let mut dcols = vec![T::zero(); rows * plane];
        let mut gw = need_w.then(|| Tensor::zeros(self.value(w).shape()));
        let mut gx = need_x.then(|| Tensor::zeros(self.value(x).shape()));
        for s in 0..n {
            im2col(geom, gout.sample(s), &mut dcols);
            if let Some(gw) = gw.as_mut() {
                // gW (cin × rows) += x (cin × plane) · dcolsᵀ
                gemm(
                    false,
                    true,
                    cin,
                    rows,
                    plane,
                    self.nodes[x.0].value.sample(s),
                    &dcols,
                    T::one(),
                    gw.data_mut(),
                );
            }
            if let Some(gx) = gx.as_mut() {
                // gx (cin × plane) = W (cin × rows) · dcols
                gemm(
                    false,
                    false,
                    cin,
                    plane,
                    rows,
                    self.nodes[w.0].value.data(),
                    &dcols,
                    T::zero(),
                    gx.sample_mut(s),
                );
            }
        }
        if let Some(gw) = gw {
            self.accumulate(w, gw);
        }
        if let Some(gx) = gx {
            self.accumulate(x, gx);
        }
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}
