//! Dense NCHW tensors and a reverse-mode tape over them.
//!
//! Tensors are plain values. Differentiation happens on a [`Tape`], which
//! owns every intermediate it records and hands out [`Var`] handles. The
//! math is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for gradient checks.

mod fused;
mod kernels;
mod tape;

pub use kernels::{resample, ResizeMode};
pub use fused::NcaStepVars;
pub use tape::{Axes, BnMode, BnStats, Gradients, ParamId, Tape, TapeMark, Var};

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = a · b + beta · c` for row-major operands. `trans_*` reads the
    /// operand as stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical operand is rows×cols; stored either as-is or transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: bounds checked above; strides describe dense
                // row-major (or transposed) storage inside those bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Per-channel vector `(1, c, 1, 1)`.
    pub const fn channels(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("tensor", "data length", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `h·w` slice for one `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", "numel", self.data.len(), shape.numel()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape("zip_map", other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            let s = t.shape;
            if s.c != first.c || s.h != first.h || s.w != first.w {
                return Err(Error::shape("stack", "item shape", first.numel(), s.numel()));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// The `i`-th batch entry as an `n = 1` tensor.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.h {
            return Err(Error::shape("crop", "height", s.h, y0 + h));
        }
        if x0 + w > s.w {
            return Err(Error::shape("crop", "width", s.w, x0 + w));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..h {
                    let row = s.index(n, c, y0 + y, x0);
                    data.extend_from_slice(&self.data[row..row + w]);
                }
            }
        }
        Ok(Tensor { shape: out, data })
    }

    /// `1` where the value is at least `level`, else `0`.
    pub fn threshold(&self, level: T) -> Self {
        self.map(|v| if v >= level { T::one() } else { T::zero() })
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        let got = self.shape;
        for (dim, e, g) in [
            ("batch", expected.n, got.n),
            ("channels", expected.c, got.c),
            ("height", expected.h, got.h),
            ("width", expected.w, got.w),
        ] {
            if e != g {
                return Err(Error::shape(op, dim, e, g));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [1.0f64; 4];
        f64::gemm(2, 3, 2, &at, true, &b, false, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_fn(Shape::new(1, 2, 4, 4), |_, c, y, x| (c * 100 + y * 10 + x) as f32);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 22.0, 23.0, 112.0, 113.0, 122.0, 123.0]);
        let s = Tensor::stack(&[&c, &c]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.batch_item(1), c);
        assert!(t.crop(3, 0, 2, 2).is_err());
    }
}
