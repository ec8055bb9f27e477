use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::fused::{self, NcaStepSaved, NcaStepVars};
use super::kernels::{col2im_3x3, im2col_3x3, lane_dot, lane_sum, resample, resample_bilinear_backward, ResizeMode};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u32,
}

/// Stable identifier of a trainable tensor; gradients are reported by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Reduction axes, `true` meaning "reduce".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub const ALL: Axes = Axes {
        n: true,
        c: true,
        h: true,
        w: true,
    };
    /// Everything except channels, i.e. a per-channel reduction.
    pub const SPATIAL_BATCH: Axes = Axes {
        n: true,
        c: false,
        h: true,
        w: true,
    };

    fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(
            if self.n { 1 } else { s.n },
            if self.c { 1 } else { s.c },
            if self.h { 1 } else { s.h },
            if self.w { 1 } else { s.w },
        )
    }
}

/// Running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and fold them into `running`.
    Train { running: &'a mut BnStats<T>, momentum: T },
    /// Normalize with the stored running statistics.
    Eval { running: &'a BnStats<T> },
    /// Normalize with batch statistics; nothing is stored.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Channel,
    Scalar,
}

enum Op<T> {
    Leaf,
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Scale(usize, T),
    Shift(usize),
    Reduce {
        x: usize,
        axes: Axes,
        mean: bool,
    },
    Resample(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    Pin {
        x: usize,
        k: usize,
    },
    MaskPixels {
        x: usize,
        mask: Vec<T>,
    },
    Crop {
        x: usize,
        y0: usize,
        x0: usize,
    },
    SoftDice {
        p: usize,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        num: T,
        den: T,
    },
    Focal {
        p: usize,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        alpha: T,
        gamma: T,
        norm: T,
    },
    NcaStep {
        state: usize,
        params: [usize; 9],
        saved: NcaStepSaved<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum with another map, in ascending parameter order.
    pub fn merge(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => {
                    mine.expect_shape("merge", g.shape())?;
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Single-owner record of operations for reverse-mode differentiation.
///
/// A tape supports exactly one [`backward`](Tape::backward) call; a second
/// call fails with [`Error::TapeConsumed`].
pub struct Tape<T: Scalar = f32> {
    id: u32,
    grad_enabled: bool,
    consumed: bool,
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, usize)>,
}

/// Position on a tape, see [`Tape::compact`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark(usize);

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            consumed: false,
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("var from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let (op, needs_grad) = if self.grad_enabled {
            (op, needs_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        if self.grad_enabled {
            self.params.push((id, v.index));
        }
        v
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Drops everything recorded after `mark` except `keep`, which is
    /// re-recorded as a constant. Only valid on inference tapes, where it
    /// bounds memory during long rollouts.
    pub fn compact(&mut self, mark: TapeMark, keep: Var) -> Result<Var> {
        if self.grad_enabled {
            return Err(Error::invalid("compact() on a gradient-recording tape"));
        }
        let i = self.idx(keep)?;
        if i < mark.0 {
            return Ok(keep);
        }
        let value = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(Shape::default()));
        self.nodes.truncate(mark.0);
        Ok(self.constant(value))
    }

    // ---- layers -------------------------------------------------------

    /// 3×3 convolution with reflect padding, stride 1.
    /// `weight: [cout, cin, 3, 3]`, `bias: [1, cout, 1, 1]`.
    pub fn conv2d_3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if ws.h != 3 || ws.w != 3 {
            return Err(Error::shape("conv2d_3x3", "kernel size", 3, if ws.h != 3 { ws.h } else { ws.w }));
        }
        if ws.c != xs.c {
            return Err(Error::shape("conv2d_3x3", "input channels", ws.c, xs.c));
        }
        if xs.h == 0 || xs.w == 0 {
            return Err(Error::invalid("conv2d_3x3: empty spatial extent"));
        }
        self.nodes[bi]
            .value
            .expect_shape("conv2d_3x3 bias", Shape::channels(ws.n))?;
        let cout = ws.n;
        let p = xs.plane();
        let out_shape = Shape::new(xs.n, cout, xs.h, xs.w);
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut cols = Vec::new();
        {
            let xv = &self.nodes[xi].value;
            let wv = self.nodes[wi].value.data();
            let bv = self.nodes[bi].value.data();
            for n in 0..xs.n {
                im2col_3x3(xv, n, &mut cols);
                let dst = &mut out[n * cout * p..(n + 1) * cout * p];
                for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                    row.fill(bv[co]);
                }
                T::gemm(cout, xs.c * 9, p, wv, false, &cols, false, T::one(), dst);
            }
        }
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Conv3x3 { x: xi, w: wi, b: bi }, needs))
    }

    /// Per-pixel affine map. `weight: [cout, cin, 1, 1]`,
    /// `bias: [1, cout, 1, 1]`.
    pub fn dense_1x1(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("dense_1x1", "kernel size", 1, ws.h.max(ws.w)));
        }
        if ws.c != xs.c {
            return Err(Error::shape("dense_1x1", "input channels", ws.c, xs.c));
        }
        if let Some(bi) = bi {
            self.nodes[bi]
                .value
                .expect_shape("dense_1x1 bias", Shape::channels(ws.n))?;
        }
        let (cin, cout, p) = (xs.c, ws.n, xs.plane());
        let out_shape = Shape::new(xs.n, cout, xs.h, xs.w);
        let mut out = vec![T::zero(); out_shape.numel()];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            for n in 0..xs.n {
                let dst = &mut out[n * cout * p..(n + 1) * cout * p];
                let beta = match bi {
                    Some(bi) => {
                        let bv = self.nodes[bi].value.data();
                        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                            row.fill(bv[co]);
                        }
                        T::one()
                    }
                    None => T::zero(),
                };
                T::gemm(cout, cin, p, wv, false, &xv[n * cin * p..(n + 1) * cin * p], false, beta, dst);
            }
        }
        let needs = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }, needs))
    }

    /// Per-channel normalization over `(n, h, w)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if eps <= T::zero() {
            return Err(Error::invalid("batch_norm: eps must be positive"));
        }
        let xs = self.nodes[xi].value.shape();
        let c = xs.c;
        self.nodes[gi].value.expect_shape("batch_norm gamma", Shape::channels(c))?;
        self.nodes[bi].value.expect_shape("batch_norm beta", Shape::channels(c))?;
        let p = xs.plane();
        let count = xs.n * p;
        let xv = self.nodes[xi].value.data();
        let (mean, inv_std, batch_stats) = match mode {
            BnMode::Train { running, momentum } => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats", c, running.mean.len()));
                }
                let (mean, var) = batch_moments(xv, xs.n, c, p, "batch_norm")?;
                fold_running(&mut running.mean, &mut running.var, &mean, &var, count, momentum);
                (mean, var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>(), true)
            }
            BnMode::Batch => {
                let (mean, var) = batch_moments(xv, xs.n, c, p, "batch_norm")?;
                (mean, var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>(), true)
            }
            BnMode::Eval { running } => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats", c, running.mean.len()));
                }
                let inv_std = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>();
                (running.mean.clone(), inv_std, false)
            }
        };
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut out = vec![T::zero(); xs.numel()];
        for n in 0..xs.n {
            for ch in 0..c {
                let base = (n * c + ch) * p;
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                for (o, &v) in out[base..base + p].iter_mut().zip(&xv[base..base + p]) {
                    *o = v * scale + shift;
                }
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// One fused NCA update; see [`fused`](super::fused) for the exact function.
    /// `mask` is `[n, 1, h, w]` (all cells fire when `None`) and `pinned`
    /// overwrites the leading `pinned.c` channels of the result.
    pub fn nca_step(
        &mut self,
        state: Var,
        vars: &NcaStepVars,
        mode: BnMode<'_, T>,
        eps: T,
        mask: Option<&Tensor<T>>,
        pinned: &Tensor<T>,
    ) -> Result<Var> {
        let si = self.idx(state)?;
        let mut pi = [0usize; 9];
        for (slot, v) in pi.iter_mut().zip(vars.all()) {
            *slot = self.idx(v)?;
        }
        if eps <= T::zero() {
            return Err(Error::invalid("nca_step: eps must be positive"));
        }
        let sv = &self.nodes[si].value;
        let s = sv.shape();
        let tensors = pi.map(|i| &self.nodes[i].value);
        fused::check_shapes(s, tensors)?;
        let hd = tensors[4].shape().n;
        if let Some(m) = mask {
            m.expect_shape("nca_step mask", Shape::new(s.n, 1, s.h, s.w))?;
        }
        let k = pinned.shape().c;
        if k > s.c {
            return Err(Error::shape("nca_step", "pinned channels", s.c, k));
        }
        pinned.expect_shape("nca_step pinned", Shape::new(s.n, k, s.h, s.w))?;
        let weights = fused::StepWeights::new(tensors);
        let bn = match mode {
            BnMode::Train { running, momentum } => {
                if running.mean.len() != hd || running.var.len() != hd {
                    return Err(Error::shape("nca_step", "running stats", hd, running.mean.len()));
                }
                fused::StepBn::Train {
                    mean: &mut running.mean,
                    var: &mut running.var,
                    momentum,
                }
            }
            BnMode::Eval { running } => {
                if running.mean.len() != hd || running.var.len() != hd {
                    return Err(Error::shape("nca_step", "running stats", hd, running.mean.len()));
                }
                fused::StepBn::Eval {
                    mean: &running.mean,
                    var: &running.var,
                }
            }
            BnMode::Batch => fused::StepBn::Batch,
        };
        let (value, saved) = fused::forward(sv, &weights, bn, eps, mask, pinned)?;
        let needs = self.needs(si) || pi.iter().any(|&i| self.needs(i));
        Ok(self.push(
            value,
            Op::NcaStep {
                state: si,
                params: pi,
                saved,
            },
            needs,
        ))
    }

    // ---- elementwise --------------------------------------------------

    fn bcast(op: &'static str, a: Shape, b: Shape) -> Result<Bcast> {
        if a == b {
            Ok(Bcast::Same)
        } else if b == Shape::scalar() {
            Ok(Bcast::Scalar)
        } else if b == Shape::channels(a.c) {
            Ok(Bcast::Channel)
        } else {
            let dim = if a.n != b.n {
                ("batch", a.n, b.n)
            } else if a.c != b.c {
                ("channels", a.c, b.c)
            } else if a.h != b.h {
                ("height", a.h, b.h)
            } else {
                ("width", a.w, b.w)
            };
            Err(Error::shape(op, dim.0, dim.1, dim.2))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Bcast, Tensor<T>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let s = av.shape();
        let mode = Self::bcast(op, s, bv.shape())?;
        let p = s.plane();
        let bd = bv.data();
        let data: Vec<T> = match mode {
            Bcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Channel => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[(i / p) % s.c]))
                .collect(),
        };
        Ok((ai, bi, mode, Tensor::from_vec(s, data)?))
    }

    /// `a + b`; `b` may be a per-channel vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, m, v) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(v, Op::Add(ai, bi, m), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, m, v) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(v, Op::Sub(ai, bi, m), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, m, v) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(v, Op::Mul(ai, bi, m), needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.map(f);
        let needs = self.needs(xi);
        Ok(self.push(v, op(xi), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs)
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, |i| Op::Scale(i, s))
    }

    pub fn scalar_add(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::Shift)
    }

    // ---- reductions ---------------------------------------------------

    fn reduce(&mut self, x: Var, axes: Axes, mean: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        let os = axes.out_shape(s);
        let mut out = vec![T::zero(); os.numel()];
        let mut i = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let o = os.index(
                            if axes.n { 0 } else { n },
                            if axes.c { 0 } else { c },
                            if axes.h { 0 } else { y },
                            if axes.w { 0 } else { xx },
                        );
                        out[o] = out[o] + xv.data()[i];
                        i += 1;
                    }
                }
            }
        }
        if mean {
            let cnt = T::from_usize((s.numel() / os.numel().max(1)).max(1)).unwrap();
            out.iter_mut().for_each(|v| *v = *v / cnt);
        }
        let needs = self.needs(xi);
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(value, Op::Reduce { x: xi, axes, mean }, needs))
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    // ---- layout -------------------------------------------------------

    /// Resize planes. Bilinear is differentiable; nearest produces a
    /// constant that gradients do not pass through.
    pub fn resample(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = resample(&self.nodes[xi].value, out_h, out_w, mode)?;
        match mode {
            ResizeMode::Bilinear => {
                let needs = self.needs(xi);
                Ok(self.push(v, Op::Resample(xi), needs))
            }
            ResizeMode::Nearest => Ok(self.constant(v)),
        }
    }

    /// Concatenate along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self
            .nodes
            .get(*idx.first().ok_or_else(|| Error::invalid("concat of zero inputs"))?)
            .unwrap()
            .value
            .shape();
        let mut c_total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.n != first.n {
                return Err(Error::shape("concat_channels", "batch", first.n, s.n));
            }
            if s.h != first.h {
                return Err(Error::shape("concat_channels", "height", first.h, s.h));
            }
            if s.w != first.w {
                return Err(Error::shape("concat_channels", "width", first.w, s.w));
            }
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let per = t.shape().c * first.plane();
                out.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let needs = idx.iter().any(|&i| self.needs(i));
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(value, Op::Concat(idx), needs))
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if start + len > s.c {
            return Err(Error::shape("narrow_channels", "channels", s.c, start + len));
        }
        let p = s.plane();
        let mut out = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            out.extend_from_slice(&xv.data()[base..base + len * p]);
        }
        let needs = self.needs(xi);
        let value = Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), out)?;
        Ok(self.push(value, Op::Narrow { x: xi, start }, needs))
    }

    /// Overwrite the leading `values.c` channels of `x` with constants.
    pub fn pin_channels(&mut self, x: Var, values: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        let vs = values.shape();
        let k = vs.c;
        values.expect_shape("pin_channels", Shape::new(s.n, k, s.h, s.w))?;
        if k > s.c {
            return Err(Error::shape("pin_channels", "channels", s.c, k));
        }
        let mut v = self.nodes[xi].value.clone();
        let p = s.plane();
        for n in 0..s.n {
            let dst = (n * s.c) * p;
            let src = (n * k) * p;
            v.data_mut()[dst..dst + k * p].copy_from_slice(&values.data()[src..src + k * p]);
        }
        let needs = self.needs(xi);
        Ok(self.push(v, Op::Pin { x: xi, k }, needs))
    }

    /// Multiply by a constant `[n, 1, h, w]` mask shared across channels.
    pub fn mask_pixels(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        mask.expect_shape("mask_pixels", Shape::new(s.n, 1, s.h, s.w))?;
        let p = s.plane();
        let mut v = self.nodes[xi].value.clone();
        let m = mask.data();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            let n = i / (s.c * p);
            *val = *val * m[n * p + i % p];
        }
        let needs = self.needs(xi);
        Ok(self.push(
            v,
            Op::MaskPixels {
                x: xi,
                mask: m.to_vec(),
            },
            needs,
        ))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.crop(y0, x0, h, w)?;
        let needs = self.needs(xi);
        Ok(self.push(v, Op::Crop { x: xi, y0, x0 }, needs))
    }

    // ---- fused losses -------------------------------------------------

    /// Weighted soft Dice coefficient over every element:
    /// `(2 Σ w p t + eps) / (Σ w p + Σ w t + eps)`.
    pub fn soft_dice(&mut self, p: Var, target: &Tensor<T>, weight: Option<&Tensor<T>>, eps: T) -> Result<Var> {
        let pi = self.idx(p)?;
        let s = self.nodes[pi].value.shape();
        target.expect_shape("soft_dice target", s)?;
        if let Some(w) = weight {
            w.expect_shape("soft_dice weights", s)?;
        }
        let pv = self.nodes[pi].value.data();
        let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
        for i in 0..pv.len() {
            let w = weight.map_or(T::one(), |w| w.data()[i]);
            let t = target.data()[i];
            inter = inter + w * pv[i] * t;
            sp = sp + w * pv[i];
            st = st + w * t;
        }
        let two = T::one() + T::one();
        let num = two * inter + eps;
        let den = sp + st + eps;
        let needs = self.needs(pi);
        Ok(self.push(
            Tensor::scalar(num / den),
            Op::SoftDice {
                p: pi,
                target: target.clone(),
                weight: weight.cloned(),
                num,
                den,
            },
            needs,
        ))
    }

    /// Weighted mean focal loss. Probabilities are clamped into
    /// `[1e-7, 1 - 1e-7]`; the gradient is zero where the clamp is active.
    /// With zero total weight the plain mean is used.
    pub fn focal(&mut self, p: Var, target: &Tensor<T>, weight: Option<&Tensor<T>>, alpha: T, gamma: T) -> Result<Var> {
        let pi = self.idx(p)?;
        let s = self.nodes[pi].value.shape();
        target.expect_shape("focal target", s)?;
        if let Some(w) = weight {
            w.expect_shape("focal weights", s)?;
        }
        let pv = self.nodes[pi].value.data();
        let total_w: T = weight.map_or(T::from_usize(pv.len()).unwrap(), |w| w.data().iter().copied().sum());
        let (weight, norm) = if total_w > T::zero() {
            (weight, total_w)
        } else {
            (None, T::from_usize(pv.len().max(1)).unwrap())
        };
        let mut acc = T::zero();
        for i in 0..pv.len() {
            let w = weight.map_or(T::one(), |w| w.data()[i]);
            if w == T::zero() {
                continue;
            }
            acc = acc + w * focal_term(pv[i], target.data()[i], alpha, gamma).0;
        }
        let needs = self.needs(pi);
        Ok(self.push(
            Tensor::scalar(acc / norm),
            Op::Focal {
                p: pi,
                target: target.clone(),
                weight: weight.cloned(),
                alpha,
                gamma,
                norm,
            },
            needs,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` for every registered parameter.
    /// Parameters the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::NoGrad);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.idx(loss)?;
        let numel = self.nodes[li].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::ones(self.nodes[li].value.shape()));
        let mut leaf_grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.insert(i, g);
                continue;
            }
            self.backprop_node(i, g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for &(id, i) in &self.params {
            let g = leaf_grads
                .remove(&i)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            match out.get_mut(&id) {
                None => {
                    out.insert(id, g);
                }
                Some(existing) => {
                    let existing: &mut Tensor<T> = existing;
                    for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3x3 { x, w, b } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let xs = xv.shape();
                let cout = wv.shape().n;
                let k = xs.c * 9;
                let p = xs.plane();
                let mut dw = self.needs(w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.needs(x).then(|| Tensor::zeros(xs));
                let mut cols = Vec::new();
                let mut dcols = vec![T::zero(); if dx.is_some() { k * p } else { 0 }];
                for n in 0..xs.n {
                    let gy = &g.data()[n * cout * p..(n + 1) * cout * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col_3x3(xv, n, &mut cols);
                        T::gemm(cout, p, k, gy, false, &cols, true, T::one(), dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(k, cout, p, wv.data(), true, gy, false, T::zero(), &mut dcols);
                        col2im_3x3(&dcols, dx, n);
                    }
                }
                if self.needs(b) {
                    accumulate(grads, b, channel_sums(&g));
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
            }
            &Op::Dense { x, w, b } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let xs = xv.shape();
                let (cin, cout, p) = (xs.c, wv.shape().n, xs.plane());
                if self.needs(w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for n in 0..xs.n {
                        let gy = &g.data()[n * cout * p..(n + 1) * cout * p];
                        let xn = &xv.data()[n * cin * p..(n + 1) * cin * p];
                        T::gemm(cout, p, cin, gy, false, xn, true, T::one(), dw.data_mut());
                    }
                    accumulate(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        let gy = &g.data()[n * cout * p..(n + 1) * cout * p];
                        let dst = &mut dx.data_mut()[n * cin * p..(n + 1) * cin * p];
                        T::gemm(cin, cout, p, wv.data(), true, gy, false, T::zero(), dst);
                    }
                    accumulate(grads, x, dx);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        accumulate(grads, b, channel_sums(&g));
                    }
                }
            }
            Op::NcaStep { state, params, saved } => {
                let sv = &self.nodes[*state].value;
                let weights = fused::StepWeights::new(params.map(|i| &self.nodes[i].value));
                let out = fused::backward(&g, sv, &weights, saved);
                if self.needs(*state) {
                    accumulate(grads, *state, out.state);
                }
                for (&pidx, d) in params.iter().zip(out.params) {
                    if self.needs(pidx) {
                        accumulate(grads, pidx, Tensor::from_vec(self.nodes[pidx].value.shape(), d)?);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = &self.nodes[x].value;
                let gv = self.nodes[gamma].value.data();
                let s = xv.shape();
                let (c, p) = (s.c, s.plane());
                let cnt = T::from_usize(s.n * p).unwrap();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..s.n {
                    for ch in 0..c {
                        let base = (n * c + ch) * p;
                        let xs = &xv.data()[base..base + p];
                        let gs = &g.data()[base..base + p];
                        let (m, is) = (mean[ch], inv_std[ch]);
                        dgamma[ch] = dgamma[ch] + lane_dot(gs, xs, |gy, v| gy * (v - m)) * is;
                        dbeta[ch] = dbeta[ch] + lane_sum(gs, |v| v);
                    }
                }
                if self.needs(x) {
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * p;
                            let xs = &xv.data()[base..base + p];
                            let gs = &g.data()[base..base + p];
                            let ds = &mut dx.data_mut()[base..base + p];
                            let (m, is) = (mean[ch], inv_std[ch]);
                            if *batch_stats {
                                // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                                let k = gv[ch] * is / cnt;
                                let (sb, sg) = (dbeta[ch], dgamma[ch]);
                                for ((d, &gy), &v) in ds.iter_mut().zip(gs).zip(xs) {
                                    *d = k * (cnt * gy - sb - (v - m) * is * sg);
                                }
                            } else {
                                let k = gv[ch] * is;
                                for (d, &gy) in ds.iter_mut().zip(gs) {
                                    *d = gy * k;
                                }
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if self.needs(gamma) {
                    accumulate(grads, gamma, Tensor::from_vec(Shape::channels(c), dgamma)?);
                }
                if self.needs(beta) {
                    accumulate(grads, beta, Tensor::from_vec(Shape::channels(c), dbeta)?);
                }
            }
            &Op::Add(a, b, m) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(grads, b, reduce_to(&g, m));
                }
            }
            &Op::Sub(a, b, m) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(grads, b, reduce_to(&g.map(|v| -v), m));
                }
            }
            &Op::Mul(a, b, m) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let s = av.shape();
                let p = s.plane();
                let bval = |i: usize| match m {
                    Bcast::Same => bv.data()[i],
                    Bcast::Scalar => bv.data()[0],
                    Bcast::Channel => bv.data()[(i / p) % s.c],
                };
                if self.needs(a) {
                    let da = g.data().iter().enumerate().map(|(i, &gy)| gy * bval(i)).collect();
                    accumulate(grads, a, Tensor::from_vec(s, da)?);
                }
                if self.needs(b) {
                    let prod = g.zip_map(av, |x, y| x * y)?;
                    accumulate(grads, b, reduce_to(&prod, m));
                }
            }
            &Op::Relu(x) => {
                let dx = g.zip_map(&self.nodes[x].value, |gy, v| if v > T::zero() { gy } else { T::zero() })?;
                accumulate(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gy, s| gy * s * (T::one() - s))?;
                accumulate(grads, x, dx);
            }
            &Op::Abs(x) => {
                let dx = g.zip_map(&self.nodes[x].value, |gy, v| {
                    if v > T::zero() {
                        gy
                    } else if v < T::zero() {
                        -gy
                    } else {
                        T::zero()
                    }
                })?;
                accumulate(grads, x, dx);
            }
            &Op::Scale(x, s) => accumulate(grads, x, g.map(|v| v * s)),
            &Op::Shift(x) => accumulate(grads, x, g),
            &Op::Reduce { x, axes, mean } => {
                let s = self.nodes[x].value.shape();
                let os = node.value.shape();
                let scale = if mean {
                    T::one() / T::from_usize((s.numel() / os.numel().max(1)).max(1)).unwrap()
                } else {
                    T::one()
                };
                let dx = Tensor::from_fn(s, |n, c, y, xx| {
                    let o = os.index(
                        if axes.n { 0 } else { n },
                        if axes.c { 0 } else { c },
                        if axes.h { 0 } else { y },
                        if axes.w { 0 } else { xx },
                    );
                    g.data()[o] * scale
                });
                accumulate(grads, x, dx);
            }
            &Op::Resample(x) => {
                let dx = resample_bilinear_backward(&g, self.nodes[x].value.shape());
                accumulate(grads, x, dx);
            }
            Op::Concat(inputs) => {
                let s = g.shape();
                let p = s.plane();
                let mut offset = 0;
                for &inp in inputs {
                    let is = self.nodes[inp].value.shape();
                    if self.needs(inp) {
                        let mut d = Vec::with_capacity(is.numel());
                        for n in 0..s.n {
                            let base = (n * s.c + offset) * p;
                            d.extend_from_slice(&g.data()[base..base + is.c * p]);
                        }
                        accumulate(grads, inp, Tensor::from_vec(is, d)?);
                    }
                    offset += is.c;
                }
            }
            &Op::Narrow { x, start } => {
                let s = self.nodes[x].value.shape();
                let gs = g.shape();
                let p = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p;
                    let src = n * gs.c * p;
                    dx.data_mut()[dst..dst + gs.c * p].copy_from_slice(&g.data()[src..src + gs.c * p]);
                }
                accumulate(grads, x, dx);
            }
            &Op::Pin { x, k } => {
                let mut dx = g;
                let s = dx.shape();
                let p = s.plane();
                for n in 0..s.n {
                    let base = n * s.c * p;
                    dx.data_mut()[base..base + k * p].fill(T::zero());
                }
                accumulate(grads, x, dx);
            }
            Op::MaskPixels { x, mask } => {
                let s = g.shape();
                let p = s.plane();
                let mut dx = g;
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    let n = i / (s.c * p);
                    *v = *v * mask[n * p + i % p];
                }
                accumulate(grads, *x, dx);
            }
            &Op::Crop { x, y0, x0 } => {
                let s = self.nodes[x].value.shape();
                let gs = g.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..gs.h {
                            let src = gs.index(n, c, y, 0);
                            let dst = s.index(n, c, y0 + y, x0);
                            dx.data_mut()[dst..dst + gs.w].copy_from_slice(&g.data()[src..src + gs.w]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::SoftDice {
                p,
                target,
                weight,
                num,
                den,
            } => {
                let upstream = g.data()[0];
                let two = T::one() + T::one();
                let d2 = *den * *den;
                let s = self.nodes[*p].value.shape();
                let dp = (0..s.numel())
                    .map(|i| {
                        let w = weight.as_ref().map_or(T::one(), |w| w.data()[i]);
                        upstream * w * (two * target.data()[i] * *den - *num) / d2
                    })
                    .collect();
                accumulate(grads, *p, Tensor::from_vec(s, dp)?);
            }
            Op::Focal {
                p,
                target,
                weight,
                alpha,
                gamma,
                norm,
            } => {
                let upstream = g.data()[0];
                let pv = &self.nodes[*p].value;
                let dp = (0..pv.numel())
                    .map(|i| {
                        let w = weight.as_ref().map_or(T::one(), |w| w.data()[i]);
                        if w == T::zero() {
                            return T::zero();
                        }
                        let (_, d) = focal_term(pv.data()[i], target.data()[i], *alpha, *gamma);
                        upstream * w * d / *norm
                    })
                    .collect();
                accumulate(grads, *p, Tensor::from_vec(pv.shape(), dp)?);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Focal loss of one pixel and its derivative with respect to `p`.
pub(crate) fn focal_term<T: Scalar>(p: T, t: T, alpha: T, gamma: T) -> (T, T) {
    let lo = T::from_f64_lossy(1e-7);
    let hi = T::one() - lo;
    let clamped = p < lo || p > hi;
    let pc = p.max(lo).min(hi);
    let pt = t * pc + (T::one() - t) * (T::one() - pc);
    let q = T::one() - pt;
    let lnp = pt.ln();
    let mod_ = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
    let loss = -alpha * mod_ * lnp;
    if clamped {
        return (loss, T::zero());
    }
    let dmod = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - T::one())
    };
    // d/dpt [-(a) q^g ln pt] = -a (q^g / pt - g q^(g-1) ln pt)
    let dpt = -alpha * (mod_ / pt - dmod * lnp);
    let dpt_dp = t + t - T::one();
    (loss, dpt * dpt_dp)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut grads[i] {
        slot @ None => *slot = Some(g),
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            *o = *o + g.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(Shape::channels(s.c), out).unwrap()
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, m: Bcast) -> Tensor<T> {
    match m {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Channel => channel_sums(g),
    }
}

/// Per-channel biased mean and variance over `(n, h, w)` of an `[n, c, p]` buffer.
pub(crate) fn batch_moments<T: Scalar>(x: &[T], n: usize, c: usize, p: usize, op: &'static str) -> Result<(Vec<T>, Vec<T>)> {
    let count = n * p;
    if count == 0 {
        return Err(Error::invalid(format!("{op}: empty batch")));
    }
    let cnt = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * p;
            s = s + lane_sum(&x[base..base + p], |v| v);
        }
        let m = s / cnt;
        let mut sq = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * p;
            sq = sq + lane_sum(&x[base..base + p], |v| (v - m) * (v - m));
        }
        mean[ch] = m;
        var[ch] = sq / cnt;
    }
    Ok((mean, var))
}

/// EMA update with the unbiased batch variance.
pub(crate) fn fold_running<T: Scalar>(rm: &mut [T], rv: &mut [T], mean: &[T], var: &[T], count: usize, momentum: T) {
    let cnt = T::from_usize(count).unwrap();
    for ch in 0..mean.len() {
        let unbiased = if count > 1 { var[ch] * cnt / (cnt - T::one()) } else { var[ch] };
        rm[ch] = (T::one() - momentum) * rm[ch] + momentum * mean[ch];
        rv[ch] = (T::one() - momentum) * rv[ch] + momentum * unbiased;
    }
}
