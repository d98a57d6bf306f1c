use rand::Rng;

use super::array::{strides, Array};
use super::kernels::{self, broadcast_strides, for_each_broadcast, split_axis, ConvGeom};
use crate::error::{shape_err, Result, SedError};

/// Clamp bound applied to probabilities inside the soft cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Linear {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Tensor,
        ph: usize,
        pw: usize,
    },
    Mean {
        x: Tensor,
        axis: usize,
    },
    Max {
        x: Tensor,
        axis: usize,
        arg: Vec<usize>,
    },
    Sum(Tensor),
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Tensor,
        perm: Vec<usize>,
    },
    Reshape(Tensor),
    Mask {
        x: Tensor,
        mask: Vec<f64>,
    },
    SoftBce {
        pred: Tensor,
        target: Tensor,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a forward pass, replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    clamped: usize,
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

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; holds dLoss/dleaf after [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `t`'s current value as a constant (stop-gradient).
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let v = self.nodes[t.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.rg(t)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// Number of probability entries clamped by [`Tape::soft_bce_sum`].
    pub fn clamped_entries(&self) -> usize {
        self.clamped
    }

    /// Discards gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bs = broadcast_strides(av.shape(), bv.shape())?;
        let mut out = Array::zeros(av.shape());
        let (ad, bd) = (av.data(), bv.data());
        let od = out.data_mut();
        for_each_broadcast(av.shape(), &bs, |ia, ib| od[ia] = f(ad[ia], bd[ib]));
        Ok(out)
    }

    /// `a + b`, with `b` broadcast over its size-1 dims.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let v = Array::new(xv.shape(), xv.data().iter().map(|&e| f(e)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn scale(&mut self, x: Tensor, k: f64) -> Tensor {
        self.unary(x, |e| e * k, Op::Scale(x, k))
    }

    pub fn offset(&mut self, x: Tensor, c: f64) -> Tensor {
        self.unary(x, |e| e + c, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`. Identity when
    /// `rng` is `None` (evaluation) or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Tensor,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SedError::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let v = Array::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Mask { x, mask }, rg))
    }

    // ----- dense layers ------------------------------------------------

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err!("linear: bias {:?} vs {out_f} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_f;
        let mut out = vec![0.0; rows * out_f];
        kernels::gemm(
            rows,
            in_f,
            out_f,
            self.value(x).data(),
            (in_f, 1),
            self.value(w).data(),
            (1, in_f),
            0.0,
            &mut out,
            (out_f, 1),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Array::new(out_shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]` (odd kernel), `b: [Cout]`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err!("conv2d: input {:?} vs kernel {:?}", xs, ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(shape_err!("conv2d: same padding needs odd kernel, got {:?}", ws));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} vs {cout} channels", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ph: ws[2] / 2,
            pw: ws[3] / 2,
        };
        let (n, hw, k) = (xs[0], geom.pixels(), geom.patch());
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = vec![0.0; k * hw];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for s in 0..n {
            kernels::im2col(&xd[s * geom.cin * hw..(s + 1) * geom.cin * hw], &geom, &mut cols);
            let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
            kernels::gemm(cout, k, hw, wd, (k, 1), &cols, (hw, 1), 0.0, dst, (hw, 1));
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (o, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bd[o]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Array::new(vec![n, cout, geom.h, geom.w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Non-overlapping mean pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Tensor, (ph, pw): (usize, usize)) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let nd = xs.len();
        if nd < 2 || ph == 0 || pw == 0 || xs[nd - 2] % ph != 0 || xs[nd - 1] % pw != 0 {
            return Err(shape_err!("avg_pool2d: {:?} not divisible by ({ph},{pw})", xs));
        }
        let (h, w) = (xs[nd - 2], xs[nd - 1]);
        let (oh, ow) = (h / ph, w / pw);
        let planes: usize = xs[..nd - 2].iter().product();
        let xd = self.value(x).data();
        let norm = 1.0 / (ph * pw) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / ph) * ow + xx / pw] += xd[(p * h + y) * w + xx] * norm;
                }
            }
        }
        let mut os = xs.clone();
        os[nd - 2] = oh;
        os[nd - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Array::new(os, out)?, Op::AvgPool2d { x, ph, pw }, rg))
    }

    // ----- reductions and structure -------------------------------------

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err!("mean over axis {axis} of {:?}", xs));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut os = xs;
        os[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Array::new(os, out)?, Op::Mean { x, axis }, rg))
    }

    /// Max over `axis`, keeping it with size 1. Ties go to the first index.
    pub fn max_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(shape_err!("max over axis {axis} of {:?}", xs));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + j) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = j;
                    }
                }
            }
        }
        let mut os = xs;
        os[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Array::new(os, out)?, Op::Max { x, axis, arg }, rg))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} for {:?}", base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {:?} vs {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut os = base;
        os[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::new(os, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(shape_err!("slice {start}..{} of axis {axis} in {:?}", start + len, xs));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut os = xs;
        os[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Array::new(os, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("permute {:?} of {:?}", perm, xs));
        }
        let xst = strides(&xs);
        let os: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| xst[p]).collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for_each_broadcast(&os, &src, |io, ix| out[io] = xd[ix]);
        let rg = self.rg(x);
        Ok(self.push(
            Array::new(os, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    // ----- losses ------------------------------------------------------

    /// `-Σ [t·ln p + (1-t)·ln(1-p)]` with `p` clamped to `[ε, 1-ε]`.
    /// Gradients flow into `target` too unless it is a constant.
    pub fn soft_bce_sum(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err!(
                "bce: prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let mut total = 0.0;
        let mut clamped = 0;
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if pc != p {
                clamped += 1;
            }
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        self.clamped += clamped;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Array::scalar(total), Op::SoftBce { pred, target }, rg))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`; afterwards every trainable
    /// leaf upstream of it holds its gradient.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(SedError::Usage("backward called twice without reset".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(SedError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |t: Tensor| &nodes[t.0].value;
        let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[t.0].requires_grad {
                return;
            }
            let slot = grads[t.0].get_or_insert_with(|| vec![0.0; nodes[t.0].value.len()]);
            f(slot);
        };
        let out = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                let bs = broadcast_strides(out.shape(), val(*b).shape()).unwrap();
                acc(*b, &mut |gb| for_each_broadcast(out.shape(), &bs, |io, ib| gb[ib] += sign * g[io]));
            }
            Op::Mul(a, b) => {
                let bs = broadcast_strides(out.shape(), val(*b).shape()).unwrap();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| for_each_broadcast(out.shape(), &bs, |io, ib| ga[io] += g[io] * bd[ib]));
                acc(*b, &mut |gb| for_each_broadcast(out.shape(), &bs, |io, ib| gb[ib] += g[io] * ad[io]));
            }
            Op::Scale(x, k) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * k)),
            Op::Offset(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s))
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Mask { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = val(*x).len() / in_f;
                let wd = val(*w).data();
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    kernels::gemm(rows, out_f, in_f, g, (out_f, 1), wd, (in_f, 1), 1.0, gx, (in_f, 1))
                });
                acc(*w, &mut |gw| {
                    kernels::gemm(out_f, rows, in_f, g, (1, out_f), xd, (in_f, 1), 1.0, gw, (in_f, 1))
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(out_f) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cout = val(*w).shape()[0];
                let (hw, k) = (geom.pixels(), geom.patch());
                let n = val(*x).shape()[0];
                let xd = val(*x).data();
                let wd = val(*w).data();
                let chunk_in = geom.cin * hw;
                if nodes[w.0].requires_grad {
                    let mut cols = vec![0.0; k * hw];
                    acc(*w, &mut |gw| {
                        for s in 0..n {
                            kernels::im2col(&xd[s * chunk_in..(s + 1) * chunk_in], geom, &mut cols);
                            let gy = &g[s * cout * hw..(s + 1) * cout * hw];
                            kernels::gemm(cout, hw, k, gy, (hw, 1), &cols, (1, hw), 1.0, gw, (k, 1));
                        }
                    });
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; k * hw];
                    acc(*x, &mut |gx| {
                        for s in 0..n {
                            let gy = &g[s * cout * hw..(s + 1) * cout * hw];
                            kernels::gemm(k, cout, hw, wd, (1, k), gy, (hw, 1), 0.0, &mut dcols, (hw, 1));
                            kernels::col2im_add(&dcols, geom, &mut gx[s * chunk_in..(s + 1) * chunk_in]);
                        }
                    });
                }
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for (i, plane) in g.chunks(hw).enumerate() {
                            gb[i % cout] += plane.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::AvgPool2d { x, ph, pw } => {
                let xs = val(*x).shape();
                let nd = xs.len();
                let (h, w) = (xs[nd - 2], xs[nd - 1]);
                let (oh, ow) = (h / ph, w / pw);
                let planes: usize = xs[..nd - 2].iter().product();
                let norm = 1.0 / (ph * pw) as f64;
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[(p * h + y) * w + xx] += g[(p * oh + y / ph) * ow + xx / pw] * norm;
                            }
                        }
                    }
                })
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let inv = 1.0 / len as f64;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                })
            }
            Op::Max { x, axis, arg } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            gx[(o * len + arg[slot]) * inner + i] += g[slot];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat { parts, axis } => {
                let os = out.shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[*axis + 1..].iter().product();
                let row = os[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let from = (o * full + start) * inner;
                        gx[from..from + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                })
            }
            Op::Permute { x, perm } => {
                let xst = strides(val(*x).shape());
                let src: Vec<usize> = perm.iter().map(|&p| xst[p]).collect();
                acc(*x, &mut |gx| for_each_broadcast(out.shape(), &src, |io, ix| gx[ix] += g[io]));
            }
            Op::SoftBce { pred, target } => {
                let pd = val(*pred).data();
                let td = val(*target).data();
                acc(*pred, &mut |gp| {
                    for i in 0..gp.len() {
                        let p = pd[i];
                        if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            gp[i] -= g[0] * (td[i] / p - (1.0 - td[i]) / (1.0 - p));
                        }
                    }
                });
                acc(*target, &mut |gt| {
                    for i in 0..gt.len() {
                        let p = pd[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
                        gt[i] -= g[0] * (p.ln() - (1.0 - p).ln());
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
