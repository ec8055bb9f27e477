//! Forward/adjoint kernels shared by the tape ops.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Reflect index `i` into `0..n` (edge pixel not repeated). A length-1 axis
/// degenerates to replicate.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Reflect-padded 3×3 patches of one batch item: `[cin·9, h·w]`.
pub(crate) fn im2col_3x3<T: Scalar>(x: &Tensor<T>, n: usize, cols: &mut Vec<T>) {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let p = h * w;
    cols.clear();
    cols.resize(s.c * 9 * p, T::zero());
    let xs: [Vec<usize>; 3] = std::array::from_fn(|k| {
        (0..w)
            .map(|xx| reflect(xx as isize + k as isize - 1, w))
            .collect()
    });
    for ci in 0..s.c {
        let plane = x.plane(n, ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                let xmap = &xs[kx];
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let src = &plane[sy * w..(sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for (d, &sx) in drow.iter_mut().zip(xmap) {
                        *d = src[sx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3x3`]: scatter-add column gradients into `dx[n]`.
pub(crate) fn col2im_3x3<T: Scalar>(dcols: &[T], dx: &mut Tensor<T>, n: usize) {
    let s = dx.shape();
    let (h, w) = (s.h, s.w);
    let p = h * w;
    let xs: [Vec<usize>; 3] = std::array::from_fn(|k| {
        (0..w)
            .map(|xx| reflect(xx as isize + k as isize - 1, w))
            .collect()
    });
    let base = n * s.c * p;
    let data = dx.data_mut();
    for ci in 0..s.c {
        let plane = &mut data[base + ci * p..base + (ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let src = &dcols[r * p..(r + 1) * p];
                let xmap = &xs[kx];
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut plane[sy * w..(sy + 1) * w];
                    for (&g, &sx) in srow.iter().zip(xmap) {
                        drow[sx] = drow[sx] + g;
                    }
                }
            }
        }
    }
}

/// Sum of `f(x)` with eight independent accumulators so the loop vectorizes.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + f(v);
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |a, b| a + b);
    for &v in rest {
        total = total + f(v);
    }
    total
}

pub(crate) fn lane_dot<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + f(x[i], y[i]);
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |a, b| a + b);
    for (&x, &y) in ra.iter().zip(rb) {
        total = total + f(x, y);
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel centers (`align_corners = false`), source coordinate
    /// clamped at zero.
    Bilinear,
}

#[derive(Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub l1: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                l1: src - i0 as f64,
            }
        })
        .collect()
}

fn nearest_index(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| ((o as f64 * scale).floor() as usize).min(input - 1))
        .collect()
}

/// Resize every `(n, c)` plane to `out_h × out_w`.
pub fn resample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resample: output size must be at least 1x1"));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("resample: empty input plane"));
    }
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    match mode {
        ResizeMode::Nearest => {
            let ys = nearest_index(s.h, out_h);
            let xs = nearest_index(s.w, out_w);
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = x.plane(n, c);
                    for &sy in &ys {
                        for &sx in &xs {
                            out.push(plane[sy * s.w + sx]);
                        }
                    }
                }
            }
        }
        ResizeMode::Bilinear => {
            let ys = bilinear_taps(s.h, out_h);
            let xs = bilinear_taps(s.w, out_w);
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = x.plane(n, c);
                    for ty in &ys {
                        let ly1 = T::from_f64_lossy(ty.l1);
                        let ly0 = T::one() - ly1;
                        let r0 = &plane[ty.i0 * s.w..(ty.i0 + 1) * s.w];
                        let r1 = &plane[ty.i1 * s.w..(ty.i1 + 1) * s.w];
                        for tx in &xs {
                            let lx1 = T::from_f64_lossy(tx.l1);
                            let lx0 = T::one() - lx1;
                            let top = r0[tx.i0] * lx0 + r0[tx.i1] * lx1;
                            let bot = r1[tx.i0] * lx0 + r1[tx.i1] * lx1;
                            out.push(top * ly0 + bot * ly1);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of bilinear [`resample`].
pub(crate) fn resample_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let s = in_shape;
    let o = dy.shape();
    let ys = bilinear_taps(s.h, o.h);
    let xs = bilinear_taps(s.w, o.w);
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let base = (n * s.c + c) * p;
            let d = &mut dx.data_mut()[base..base + p];
            for (oy, ty) in ys.iter().enumerate() {
                let ly1 = T::from_f64_lossy(ty.l1);
                let ly0 = T::one() - ly1;
                for (ox, tx) in xs.iter().enumerate() {
                    let lx1 = T::from_f64_lossy(tx.l1);
                    let lx0 = T::one() - lx1;
                    let v = g[oy * o.w + ox];
                    d[ty.i0 * s.w + tx.i0] = d[ty.i0 * s.w + tx.i0] + v * ly0 * lx0;
                    d[ty.i0 * s.w + tx.i1] = d[ty.i0 * s.w + tx.i1] + v * ly0 * lx1;
                    d[ty.i1 * s.w + tx.i0] = d[ty.i1 * s.w + tx.i0] + v * ly1 * lx0;
                    d[ty.i1 * s.w + tx.i1] = d[ty.i1 * s.w + tx.i1] + v * ly1 * lx1;
                }
            }
        }
    }
    dx
}
