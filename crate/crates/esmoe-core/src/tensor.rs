//! Rank-4 tensors in batch-channel-height-width order.
//!
//! Storage is `f32` in the production path (`Tensor`), while every reduction
//! accumulates in `f64`. The same kernels can be instantiated with `f64`
//! storage, which the finite-difference checks rely on.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Element type stored in tensors and parameter arrays.
///
/// All arithmetic inside kernels runs at `f64`; implementations only convert
/// at load/store boundaries.
pub trait Scalar: Copy + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_value(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

/// Dense rank-4 array. Row-major over (n, c, y, x); contiguous storage.
#[derive(Clone, PartialEq)]
pub struct TensorBase<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

/// The production tensor type: `f32` storage, `f64` accumulation.
pub type Tensor = TensorBase<f32>;

impl<T: Scalar> TensorBase<T> {
    /// Wraps an existing buffer. Dimensions must be nonzero, the buffer length
    /// must equal `n*c*h*w`, and every element must be finite.
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidDimensions { n, c, h, w });
        }
        let volume = n * c * h * w;
        if data.len() != volume {
            return Err(Error::DataLength { expected: volume, got: data.len() });
        }
        let t = TensorBase { n, c, h, w, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidDimensions { n, c, h, w });
        }
        Ok(TensorBase { n, c, h, w, data: vec![T::from_f64(0.0); n * c * h * w] })
    }

    /// Builds a tensor by evaluating `f` at every (n, c, y, x) coordinate.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut t = Self::zeros(n, c, h, w)?;
        for bn in 0..n {
            for bc in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = t.idx(bn, bc, y, x);
                        t.data[i] = T::from_f64(f(bn, bc, y, x));
                    }
                }
            }
        }
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// Uniform random tensor in `[lo, hi]`, drawn in index order.
    pub fn random_uniform<R: Rng>(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(lo..=hi))
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    /// Element as `f64`, the precision all kernels compute in.
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.get(n, c, y, x).to_f64()
    }

    pub(crate) fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = T::from_f64(v);
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite_value()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context })
        }
    }

    /// Applies `f` elementwise at `f64` precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|v| T::from_f64(f(v.to_f64()))).collect();
        TensorBase { n: self.n, c: self.c, h: self.h, w: self.w, data }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch { expected: self.dims(), got: other.dims() });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| T::from_f64(a.to_f64() + b.to_f64()))
            .collect();
        Ok(TensorBase { n: self.n, c: self.c, h: self.h, w: self.w, data })
    }

    /// Copies one sample out as a batch-1 tensor.
    pub fn sample(&self, n: usize) -> Self {
        assert!(n < self.n, "sample index {} out of range {}", n, self.n);
        let stride = self.c * self.h * self.w;
        let data = self.data[n * stride..(n + 1) * stride].to_vec();
        TensorBase { n: 1, c: self.c, h: self.h, w: self.w, data }
    }

    /// Writes a batch-1 tensor into sample slot `n`.
    pub(crate) fn set_sample(&mut self, n: usize, src: &Self) {
        assert_eq!(src.n, 1);
        assert_eq!((src.c, src.h, src.w), (self.c, self.h, self.w));
        let stride = self.c * self.h * self.w;
        self.data[n * stride..(n + 1) * stride].copy_from_slice(&src.data);
    }

    /// Largest absolute elementwise difference, in `f64`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> fmt::Debug for TensorBase<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorBase({}x{}x{}x{}, {} elems)", self.n, self.c, self.h, self.w, self.data.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimensions() {
        let err = Tensor::zeros(0, 3, 2, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidDimensions { .. }));
        let err = Tensor::new(1, 1, 0, 1, vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidDimensions { .. }));
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        let err = Tensor::new(1, 2, 2, 2, vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 8, got: 7 }));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let err = Tensor::new(1, 1, 1, 2, vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::from_fn(2, 3, 4, 5, |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f64)
            .unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.idx(0, 0, 0, 1), 1);
        assert_eq!(t.idx(0, 0, 1, 0), 5);
        assert_eq!(t.idx(0, 1, 0, 0), 20);
        assert_eq!(t.idx(1, 0, 0, 0), 60);
    }

    #[test]
    fn sample_round_trips() {
        let t = Tensor::from_fn(3, 2, 2, 2, |n, c, y, x| (n * 8 + c * 4 + y * 2 + x) as f64)
            .unwrap();
        let s = t.sample(2);
        assert_eq!(s.dims(), (1, 2, 2, 2));
        assert_eq!(s.at(0, 1, 1, 1), 23.0);
        let mut out = Tensor::zeros(3, 2, 2, 2).unwrap();
        out.set_sample(2, &s);
        assert_eq!(out.at(2, 1, 1, 1), 23.0);
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn add_checks_shapes() {
        let a = Tensor::zeros(1, 2, 2, 2).unwrap();
        let b = Tensor::zeros(1, 2, 2, 3).unwrap();
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }
}
