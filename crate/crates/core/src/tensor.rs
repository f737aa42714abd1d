//! Minimal dense tensor containers and float-precision plumbing.

use crate::error::{Error, Result};

/// Scalar types the kernels are generic over (`f32` for compute-precision
/// runs, `f64` for oracle-grade runs).
pub trait Real:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 tensor, row-major.
///
/// For attention data the axes are `[Z, L, H, D]` (batch, padded length,
/// heads, head dim), so the strides are `[L*H*D, H*D, D, 1]`: the innermost
/// `D` values of a `(z, l, h)` row are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "tensor data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline(always)]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline(always)]
    fn offset(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert!(a < self.dims[0] && b < self.dims[1] && c < self.dims[2] && d < self.dims[3]);
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    #[inline(always)]
    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> T {
        self.data[self.offset(a, b, c, d)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, a: usize, b: usize, c: usize, d: usize) -> &mut T {
        let i = self.offset(a, b, c, d);
        &mut self.data[i]
    }

    /// Contiguous innermost row `(a, b, c, ..)` of length `dims[3]`.
    #[inline(always)]
    pub fn row(&self, a: usize, b: usize, c: usize) -> &[T] {
        let start = self.offset(a, b, c, 0);
        &self.data[start..start + self.dims[3]]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, a: usize, b: usize, c: usize) -> &mut [T] {
        let start = self.offset(a, b, c, 0);
        let d = self.dims[3];
        &mut self.data[start..start + d]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn convert<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Small dense square matrix used for explicit Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Per-element relative error with an absolute floor:
/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-12))
}

/// Largest element error relative to the overall scale of the two slices:
/// `max_i |a_i - b_i| / max(max|a|, max|b|, 1e-12)`.
///
/// This is the comparison used for kernel-vs-oracle tensor checks, where
/// individual output elements can be arbitrarily close to zero by
/// cancellation; [`rel_err`] stays the convention for scalar gradchecks.
pub fn max_rel_err_scaled<A: Real, B: Real>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    let mut max_abs_diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let x = x.as_f64();
        let y = y.as_f64();
        max_abs_diff = max_abs_diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    max_abs_diff / scale.max(1e-12)
}
