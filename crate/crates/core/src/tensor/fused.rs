//! Fused NCA update step.
//!
//! Computes, in one tape entry,
//!
//! ```text
//! x     = concat(s, conv1(s), conv2(s))
//! h     = fc0(x)
//! delta = fc1(relu(bn(h)))
//! out   = pin(s + delta ⊙ mask)
//! ```
//!
//! Only the pre-normalization activations `h` are kept for the backward
//! pass; im2col patches, perception outputs and the ReLU output are
//! recomputed. The composed-op path in [`crate::nca::cell_step_reference`]
//! computes the same function and is used to check this one.

use super::kernels::{col2im_3x3, im2col_3x3, lane_dot, lane_sum};
use super::tape::{batch_moments, fold_running};
use super::{Scalar, Shape, Tensor, Var};
use crate::error::{Error, Result};

/// Tape handles for the nine trainable tensors of one NCA cell.
#[derive(Clone, Copy, Debug)]
pub struct NcaStepVars {
    pub perceive1_w: Var,
    pub perceive1_b: Var,
    pub perceive2_w: Var,
    pub perceive2_b: Var,
    pub fc0_w: Var,
    pub fc0_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub fc1_w: Var,
}

impl NcaStepVars {
    pub(crate) fn all(&self) -> [Var; 9] {
        [
            self.perceive1_w,
            self.perceive1_b,
            self.perceive2_w,
            self.perceive2_b,
            self.fc0_w,
            self.fc0_b,
            self.bn_gamma,
            self.bn_beta,
            self.fc1_w,
        ]
    }
}

/// Borrowed weight data in [`NcaStepVars::all`] order.
pub(crate) struct StepWeights<'a, T> {
    /// perceive1 then perceive2 weights, `[2C, 9C]` row-major.
    pub perceive_w: Vec<T>,
    pub perceive_b: Vec<T>,
    pub fc0_w: &'a [T],
    pub fc0_b: &'a [T],
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub fc1_w: &'a [T],
    pub channels: usize,
    pub hidden: usize,
}

impl<'a, T: Scalar> StepWeights<'a, T> {
    pub fn new(t: [&'a Tensor<T>; 9]) -> Self {
        let [p1w, p1b, p2w, p2b, fc0w, fc0b, gamma, beta, fc1w] = t;
        let mut perceive_w = p1w.data().to_vec();
        perceive_w.extend_from_slice(p2w.data());
        let mut perceive_b = p1b.data().to_vec();
        perceive_b.extend_from_slice(p2b.data());
        StepWeights {
            perceive_w,
            perceive_b,
            fc0_w: fc0w.data(),
            fc0_b: fc0b.data(),
            gamma: gamma.data(),
            beta: beta.data(),
            fc1_w: fc1w.data(),
            channels: p1w.shape().n,
            hidden: fc0w.shape().n,
        }
    }
}

/// Validates the parameter shapes against the state.
pub(crate) fn check_shapes<T: Scalar>(state: Shape, t: [&Tensor<T>; 9]) -> Result<()> {
    let c = state.c;
    let hd = t[4].shape().n;
    let expected = [
        Shape::new(c, c, 3, 3),
        Shape::channels(c),
        Shape::new(c, c, 3, 3),
        Shape::channels(c),
        Shape::new(hd, 3 * c, 1, 1),
        Shape::channels(hd),
        Shape::channels(hd),
        Shape::channels(hd),
        Shape::new(c, hd, 1, 1),
    ];
    for (tensor, e) in t.iter().zip(expected) {
        tensor.expect_shape("nca_step", e)?;
    }
    if state.h == 0 || state.w == 0 || state.n == 0 {
        return Err(Error::invalid("nca_step: empty state"));
    }
    Ok(())
}

pub(crate) struct NcaStepSaved<T> {
    /// Pre-normalization hidden activations `[n, hidden, h, w]`.
    pub hidden: Tensor<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
    /// `n · h · w` firing mask, `None` when every cell fires.
    pub mask: Option<Vec<T>>,
    pub pinned: usize,
}

/// `x = [s_n; Wp · cols + bp]` for batch item `n`, written into `x`
/// (`[3C, P]`). Leaves the patches in `cols`.
fn perception<T: Scalar>(state: &Tensor<T>, n: usize, w: &StepWeights<T>, cols: &mut Vec<T>, x: &mut [T]) {
    let c = w.channels;
    let p = state.shape().plane();
    let sn = &state.data()[n * c * p..(n + 1) * c * p];
    x[..c * p].copy_from_slice(sn);
    im2col_3x3(state, n, cols);
    let pp = &mut x[c * p..];
    for (row, &b) in pp.chunks_exact_mut(p).zip(&w.perceive_b) {
        row.fill(b);
    }
    T::gemm(2 * c, 9 * c, p, &w.perceive_w, false, cols, false, T::one(), pp);
}

/// `a = relu(gamma · (h - mean) · inv_std + beta)` for one batch item.
fn activate<T: Scalar>(h: &[T], a: &mut [T], p: usize, w: &StepWeights<T>, mean: &[T], inv_std: &[T]) {
    for ch in 0..w.hidden {
        let scale = w.gamma[ch] * inv_std[ch];
        let shift = w.beta[ch] - mean[ch] * scale;
        let src = &h[ch * p..(ch + 1) * p];
        let dst = &mut a[ch * p..(ch + 1) * p];
        for (d, &v) in dst.iter_mut().zip(src) {
            let z = v * scale + shift;
            *d = if z > T::zero() { z } else { T::zero() };
        }
    }
}

pub(crate) enum StepBn<'a, T> {
    Train { mean: &'a mut [T], var: &'a mut [T], momentum: T },
    Eval { mean: &'a [T], var: &'a [T] },
    Batch,
}

pub(crate) fn forward<T: Scalar>(
    state: &Tensor<T>,
    w: &StepWeights<T>,
    bn: StepBn<'_, T>,
    eps: T,
    mask: Option<&Tensor<T>>,
    pinned: &Tensor<T>,
) -> Result<(Tensor<T>, NcaStepSaved<T>)> {
    let s = state.shape();
    let (c, hd, p) = (w.channels, w.hidden, s.plane());
    let mut hidden = vec![T::zero(); s.n * hd * p];
    let mut cols = Vec::new();
    let mut x = vec![T::zero(); 3 * c * p];
    for n in 0..s.n {
        perception(state, n, w, &mut cols, &mut x);
        let hn = &mut hidden[n * hd * p..(n + 1) * hd * p];
        for (row, &b) in hn.chunks_exact_mut(p).zip(w.fc0_b) {
            row.fill(b);
        }
        T::gemm(hd, 3 * c, p, w.fc0_w, false, &x, false, T::one(), hn);
    }

    let (mean, inv_std, batch_stats) = match bn {
        StepBn::Train { mean: rm, var: rv, momentum } => {
            let (mean, var) = batch_moments(&hidden, s.n, hd, p, "nca_step")?;
            fold_running(rm, rv, &mean, &var, s.n * p, momentum);
            (mean, var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>(), true)
        }
        StepBn::Batch => {
            let (mean, var) = batch_moments(&hidden, s.n, hd, p, "nca_step")?;
            (mean, var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>(), true)
        }
        StepBn::Eval { mean, var } => (
            mean.to_vec(),
            var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>(),
            false,
        ),
    };

    let k = pinned.shape().c;
    let mut out = state.data().to_vec();
    let mut a = vec![T::zero(); hd * p];
    let mut delta = vec![T::zero(); c * p];
    let mask_data = mask.map(|m| m.data());
    for n in 0..s.n {
        let hn = &hidden[n * hd * p..(n + 1) * hd * p];
        activate(hn, &mut a, p, w, &mean, &inv_std);
        T::gemm(c, hd, p, w.fc1_w, false, &a, false, T::zero(), &mut delta);
        let on = &mut out[n * c * p..(n + 1) * c * p];
        match mask_data {
            Some(m) => {
                let mn = &m[n * p..(n + 1) * p];
                for ch in k..c {
                    let o = &mut on[ch * p..(ch + 1) * p];
                    for ((o, &d), &mv) in o.iter_mut().zip(&delta[ch * p..(ch + 1) * p]).zip(mn) {
                        *o = *o + d * mv;
                    }
                }
            }
            None => {
                for ch in k..c {
                    let o = &mut on[ch * p..(ch + 1) * p];
                    for (o, &d) in o.iter_mut().zip(&delta[ch * p..(ch + 1) * p]) {
                        *o = *o + d;
                    }
                }
            }
        }
        on[..k * p].copy_from_slice(&pinned.data()[n * k * p..(n + 1) * k * p]);
    }

    let saved = NcaStepSaved {
        hidden: Tensor::from_vec(Shape::new(s.n, hd, s.h, s.w), hidden)?,
        mean,
        inv_std,
        batch_stats,
        mask: mask_data.map(|m| m.to_vec()),
        pinned: k,
    };
    Ok((Tensor::from_vec(s, out)?, saved))
}

pub(crate) struct StepGrads<T> {
    pub state: Tensor<T>,
    /// In [`NcaStepVars::all`] order.
    pub params: [Vec<T>; 9],
}

pub(crate) fn backward<T: Scalar>(
    dout: &Tensor<T>,
    state: &Tensor<T>,
    w: &StepWeights<T>,
    saved: &NcaStepSaved<T>,
) -> StepGrads<T> {
    let s = state.shape();
    let (c, hd, p) = (w.channels, w.hidden, s.plane());
    let k = saved.pinned;
    let hidden = saved.hidden.data();

    // Pinned channels receive no gradient from anything downstream.
    let mut dstate = dout.clone();
    for n in 0..s.n {
        dstate.data_mut()[n * c * p..(n * c + k) * p].fill(T::zero());
    }

    let mut dfc1 = vec![T::zero(); c * hd];
    let mut dz = vec![T::zero(); s.n * hd * p];
    let mut a = vec![T::zero(); hd * p];
    let mut ddelta = vec![T::zero(); c * p];
    for n in 0..s.n {
        let dn = &dstate.data()[n * c * p..(n + 1) * c * p];
        match &saved.mask {
            Some(m) => {
                let mn = &m[n * p..(n + 1) * p];
                for ch in 0..c {
                    for j in 0..p {
                        ddelta[ch * p + j] = dn[ch * p + j] * mn[j];
                    }
                }
            }
            None => ddelta.copy_from_slice(dn),
        }
        let hn = &hidden[n * hd * p..(n + 1) * hd * p];
        activate(hn, &mut a, p, w, &saved.mean, &saved.inv_std);
        T::gemm(c, p, hd, &ddelta, false, &a, true, T::one(), &mut dfc1);
        let dzn = &mut dz[n * hd * p..(n + 1) * hd * p];
        T::gemm(hd, c, p, w.fc1_w, true, &ddelta, false, T::zero(), dzn);
        for (d, &av) in dzn.iter_mut().zip(&a) {
            if av <= T::zero() {
                *d = T::zero();
            }
        }
    }

    let mut dgamma = vec![T::zero(); hd];
    let mut dbeta = vec![T::zero(); hd];
    for n in 0..s.n {
        for ch in 0..hd {
            let base = (n * hd + ch) * p;
            let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
            dgamma[ch] = dgamma[ch] + lane_dot(&dz[base..base + p], &hidden[base..base + p], |g, v| g * (v - m)) * is;
            dbeta[ch] = dbeta[ch] + lane_sum(&dz[base..base + p], |v| v);
        }
    }

    let cnt = T::from_usize(s.n * p).unwrap();
    let mut dfc0 = vec![T::zero(); hd * 3 * c];
    let mut dfc0_b = vec![T::zero(); hd];
    let mut dperc = vec![T::zero(); 2 * c * 9 * c];
    let mut dperc_b = vec![T::zero(); 2 * c];
    let mut cols = Vec::new();
    let mut x = vec![T::zero(); 3 * c * p];
    let mut dh = vec![T::zero(); hd * p];
    let mut dx = vec![T::zero(); 3 * c * p];
    let mut dcols = vec![T::zero(); 9 * c * p];
    let mut dsn = Tensor::zeros(Shape::new(1, c, s.h, s.w));
    for n in 0..s.n {
        for ch in 0..hd {
            let base = (n * hd + ch) * p;
            let (m, is, g) = (saved.mean[ch], saved.inv_std[ch], w.gamma[ch]);
            let src = &dz[base..base + p];
            let dst = &mut dh[ch * p..(ch + 1) * p];
            if saved.batch_stats {
                let kk = g * is / cnt;
                let (sb, sg) = (dbeta[ch], dgamma[ch]);
                for ((d, &gy), &v) in dst.iter_mut().zip(src).zip(&hidden[base..base + p]) {
                    *d = kk * (cnt * gy - sb - (v - m) * is * sg);
                }
            } else {
                let kk = g * is;
                for (d, &gy) in dst.iter_mut().zip(src) {
                    *d = gy * kk;
                }
            }
            dfc0_b[ch] = dfc0_b[ch] + lane_sum(dst, |v| v);
        }
        perception(state, n, w, &mut cols, &mut x);
        T::gemm(hd, p, 3 * c, &dh, false, &x, true, T::one(), &mut dfc0);
        T::gemm(3 * c, hd, p, w.fc0_w, true, &dh, false, T::zero(), &mut dx);
        let dpp = &dx[c * p..];
        T::gemm(2 * c, p, 9 * c, dpp, false, &cols, true, T::one(), &mut dperc);
        for (ch, b) in dperc_b.iter_mut().enumerate() {
            *b = *b + lane_sum(&dpp[ch * p..(ch + 1) * p], |v| v);
        }
        T::gemm(9 * c, 2 * c, p, &w.perceive_w, true, dpp, false, T::zero(), &mut dcols);
        dsn.data_mut().copy_from_slice(&dx[..c * p]);
        col2im_3x3(&dcols, &mut dsn, 0);
        let ds = &mut dstate.data_mut()[n * c * p..(n + 1) * c * p];
        for (d, &v) in ds.iter_mut().zip(dsn.data()) {
            *d = *d + v;
        }
    }

    let half = c * 9 * c;
    let dp2 = dperc.split_off(half);
    let db2 = dperc_b.split_off(c);
    StepGrads {
        state: dstate,
        params: [dperc, dperc_b, dp2, db2, dfc0, dfc0_b, dgamma, dbeta, dfc1],
    }
}
