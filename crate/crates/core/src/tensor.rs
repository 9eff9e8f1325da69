//! Dense row-major containers and the matrix products the convolution code is
//! built on.
//!
//! Every product accumulates each output element in ascending inner-index
//! order, starting from zero, so results are bit-reproducible run to run.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Floating-point element type: `f32` for training runs, `f64` for
/// gradient checks.
pub trait Element:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Bit width, 32 or 64.
    const BITS: u32;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Runtime choice of [`Element`] type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => Err(Error::argument(format!(
                "precision must be 32 or 64, got {other}"
            ))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }
}

/// Batched feature map with dims `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(b, c, h, w)` in row-major order.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.offset(b, c, h, w);
        self.data[i] = value;
    }

    /// Same values viewed under new dims with an equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plane of `h * w` values for one `(b, c)` pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }
}

/// Row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data: out,
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data: out,
        }
    }
}

/// `a · b`.
pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: left is {}x{}, right is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return Matrix::new(m, n, c);
    }
    for (a_row, c_row) in a
        .data
        .chunks_exact(k.max(1))
        .zip(c.chunks_exact_mut(n))
        .take(m)
    {
        for (p, &av) in a_row.iter().enumerate().take(k) {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    Matrix::new(m, n, c)
}

/// `aᵀ · b` without materializing the transpose. Accumulation order matches
/// `matmul(&a.transpose(), b)` exactly.
pub fn matmul_tn<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn: left is {}x{} (transposed), right is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return Matrix::new(m, n, c);
    }
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    Matrix::new(m, n, c)
}
