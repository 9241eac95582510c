//! Dense rank-4 tensors in row-major `(n, c, h, w)` order.
//!
//! Everything in the crate moves data around as [`Tensor4`]: image batches,
//! feature maps, convolution kernels and their gradients. There are no views,
//! strides or broadcasting; binary operations require identical shapes.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a [`Tensor4`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    /// Validated constructor: every component must be at least one and the
    /// element count must not overflow.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        shape.checked_len()?;
        Ok(shape)
    }

    fn checked_len(&self) -> Result<usize> {
        let dims = self.dims();
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&len| len <= isize::MAX as usize / std::mem::size_of::<f64>())
            .ok_or(Error::InvalidShape(dims))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements per channel plane.
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense `f64` tensor with shape `(n, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape) -> Result<Self> {
        let len = shape.checked_len()?;
        Ok(Tensor4 { shape, data: vec![0.0; len] })
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        let len = shape.checked_len()?;
        Ok(Tensor4 { shape, data: vec![value; len] })
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(Error::InvalidShape(shape.dims()));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let len = shape.checked_len()?;
        let mut data = Vec::with_capacity(len);
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Flat slice of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` out as a tensor with `n = 1`.
    pub fn select_item(&self, n: usize) -> Tensor4 {
        let shape = Shape { n: 1, ..self.shape };
        Tensor4 { shape, data: self.item(n).to_vec() }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or(Error::InvalidShape([0, 0, 0, 0]))?;
        let inner = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor4::len).sum());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (inner.c, inner.h, inner.w) {
                return Err(Error::ShapeMismatch { left: inner.dims(), right: s.dims() });
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Tensor4::from_vec(Shape { n, ..inner }, data)
    }

    fn check_same(&self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape.dims(), right: other.shape.dims() });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor4 {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// FNV-1a over the shape and the raw bit patterns of the data. Stable
    /// across processes and machines, so it can be compared between runs.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |word: u64| {
            for byte in word.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for d in self.shape.dims() {
            feed(d as u64);
        }
        for v in &self.data {
            feed(v.to_bits());
        }
        h
    }
}
