//! Independent reference implementations and finite-difference helpers.
//!
//! Everything here is written from the textbook definitions with plain
//! loops over `f64`, sharing no code with the library kernels.

#![allow(dead_code)]

pub mod checks;

use mednca::rng::Rng;
use mednca::tensor::{Shape, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_range(lo, hi))
}

pub fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

/// Mirror index without repeating the edge (`-1 → 1`, `n → n - 2`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// 3×3 convolution, reflect padding, as a direct sum over taps.
pub fn conv3x3(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let xs = x.shape();
    let cout = w.shape().n;
    Tensor::from_fn(Shape::new(xs.n, cout, xs.h, xs.w), |n, co, y, xx| {
        let mut acc = b.data()[co];
        for ci in 0..xs.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = mirror(y as isize + ky as isize - 1, xs.h);
                    let sx = mirror(xx as isize + kx as isize - 1, xs.w);
                    acc += w.at(co, ci, ky, kx) * x.at(n, ci, sy, sx);
                }
            }
        }
        acc
    })
}

/// `out[n, o, y, x] = Σ_i w[o, i] x[n, i, y, x] + b[o]`.
pub fn dense(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let xs = x.shape();
    let cout = w.shape().n;
    Tensor::from_fn(Shape::new(xs.n, cout, xs.h, xs.w), |n, o, y, xx| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for i in 0..xs.c {
            acc += w.at(o, i, 0, 0) * x.at(n, i, y, xx);
        }
        acc
    })
}

/// Bilinear resize with half-pixel centres, written as an explicit
/// weighted sum over every input pixel (tent weights).
pub fn bilinear(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let s = x.shape();
    let coord = |o: usize, input: usize, output: usize| -> f64 {
        let c = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
        c.clamp(0.0, (input - 1) as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let sy = coord(y, s.h, oh);
        let sx = coord(xx, s.w, ow);
        let mut acc = 0.0;
        for iy in 0..s.h {
            let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
            if wy == 0.0 {
                continue;
            }
            for ix in 0..s.w {
                let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                acc += wy * wx * x.at(n, c, iy, ix);
            }
        }
        acc
    })
}

/// Nearest neighbour: output `o` reads input `floor(o · in / out)`.
pub fn nearest(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        x.at(n, c, (y * s.h) / oh, (xx * s.w) / ow)
    })
}

/// Per-channel batch normalization with biased batch variance.
pub fn batch_norm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    let cnt = (s.n * s.h * s.w) as f64;
    for c in 0..s.c {
        let vals: Vec<f64> = (0..s.n)
            .flat_map(|n| (0..s.h).flat_map(move |y| (0..s.w).map(move |xx| (n, y, xx))))
            .map(|(n, y, xx)| x.at(n, c, y, xx))
            .collect();
        mean[c] = vals.iter().sum::<f64>() / cnt;
        var[c] = vals.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / cnt;
    }
    Tensor::from_fn(s, |n, c, y, xx| {
        gamma[c] * (x.at(n, c, y, xx) - mean[c]) / (var[c] + eps).sqrt() + beta[c]
    })
}

/// Per-pixel mean and population std over stored runs.
pub fn ensemble(runs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = runs.len() as f64;
    let len = runs[0].len();
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for i in 0..len {
        let col: Vec<f64> = runs.iter().map(|r| r[i]).collect();
        let m = col.iter().sum::<f64>() / n;
        mean[i] = m;
        std[i] = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

/// Textbook Adam on one scalar over a gradient sequence.
pub fn adam_scalar(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

/// Soft Dice `(2 Σ w p t + eps) / (Σ w p + Σ w t + eps)`.
pub fn soft_dice(p: &[f64], t: &[f64], w: Option<&[f64]>, eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for i in 0..p.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        inter += wi * p[i] * t[i];
        sp += wi * p[i];
        st += wi * t[i];
    }
    (2.0 * inter + eps) / (sp + st + eps)
}

/// Weighted mean of `-α (1 - p_t)^γ ln p_t`.
pub fn focal(p: &[f64], t: &[f64], w: Option<&[f64]>, alpha: f64, gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
        let pt = if t[i] > 0.5 { pc } else { 1.0 - pc };
        acc += wi * -alpha * (1.0 - pt).powf(gamma) * pt.ln();
        total += wi;
    }
    acc / total
}

/// Relative error of two gradient vectors, `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x);
    x[i] = orig - h;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * h)
}
