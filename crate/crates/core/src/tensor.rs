//! Dense row-major matrices and the kernels the encoder is built from.
//!
//! Matrix products take a [`MacCounter`] and bump it by the number of scalar
//! multiplications performed. Everything else (softmax, norms, GELU,
//! residual additions) is uncounted here; callers attribute non-MAC work to
//! `overhead_ops` themselves.

use std::ops::{Add, AddAssign};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Products below this many multiplications stay on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_MACS: usize = 1 << 16;

/// Multiplication tally for one logical stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacCounter {
    pub executed: u64,
    pub dense_equivalent: u64,
    pub overhead_ops: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, other: &MacCounter) {
        *self += *other;
    }

    /// Record work that the dense computation would have done identically.
    #[inline]
    pub fn add_dense(&mut self, macs: u64) {
        self.executed += macs;
        self.dense_equivalent += macs;
    }
}

impl Add for MacCounter {
    type Output = MacCounter;

    fn add(self, rhs: MacCounter) -> MacCounter {
        MacCounter {
            executed: self.executed + rhs.executed,
            dense_equivalent: self.dense_equivalent + rhs.dense_equivalent,
            overhead_ops: self.overhead_ops + rhs.overhead_ops,
        }
    }
}

impl AddAssign for MacCounter {
    fn add_assign(&mut self, rhs: MacCounter) {
        *self = *self + rhs;
    }
}

/// Dense 2-D array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Overwrite columns `[start, start + block.cols)` with `block`.
    pub fn set_cols(&mut self, start: usize, block: &Matrix<T>) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::shape("set_cols", self.shape(), block.shape()));
        }
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Broadcast-add a 1×cols row to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix<T>) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                self.shape(),
                bias.shape(),
            ));
        }
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x = *x + b;
            }
        }
        Ok(())
    }
}

#[inline]
fn matmul_row<T: Real>(a_row: &[T], b: &Matrix<T>, out: &mut [T]) {
    for (k, &a) in a_row.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(b.row(k)) {
            *o = *o + a * w;
        }
    }
}

fn check_matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(())
}

/// Dense product on the calling thread.
pub fn matmul_seq<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: &mut MacCounter,
) -> Result<Matrix<T>> {
    check_matmul(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols > 0 {
        for (i, o) in out.data.chunks_mut(b.cols).enumerate() {
            matmul_row(a.row(i), b, o);
        }
    }
    counter.add_dense((a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// Dense product with output rows distributed over the rayon pool. Each
/// element is accumulated in the same order as [`matmul_seq`], so the two
/// agree bit for bit.
#[cfg(feature = "parallel")]
pub fn matmul_par<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: &mut MacCounter,
) -> Result<Matrix<T>> {
    check_matmul(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols > 0 {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, o)| matmul_row(a.row(i), b, o));
    }
    counter.add_dense((a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// Dense product `a · b`. Counts `a.rows × a.cols × b.cols` executed and
/// dense-equivalent multiplications.
pub fn matmul<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: &mut MacCounter,
) -> Result<Matrix<T>> {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.cols >= PARALLEL_MACS && a.rows > 1 {
        return matmul_par(a, b, counter);
    }
    matmul_seq(a, b, counter)
}

/// Softmax of a single row with max subtraction.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub fn row_softmax<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    if out.cols > 0 {
        for row in out.data.chunks_mut(m.cols) {
            softmax_in_place(row);
        }
    }
    out
}

pub const LAYER_NORM_EPSILON: f64 = 1e-6;

/// Per-row normalization with population variance.
pub fn layer_norm<T: Real>(
    m: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    epsilon: T,
) -> Result<Matrix<T>> {
    if gamma.shape() != (1, m.cols) {
        return Err(Error::shape("layer_norm", m.shape(), gamma.shape()));
    }
    if beta.shape() != (1, m.cols) {
        return Err(Error::shape("layer_norm", m.shape(), beta.shape()));
    }
    if epsilon.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config("layer_norm epsilon must be positive".into()));
    }
    let n = T::from_f64(m.cols as f64);
    let mut out = m.clone();
    if m.cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(m.cols) {
        let mean = row.iter().fold(T::zero(), |s, &x| s + x) / n;
        let var = row
            .iter()
            .fold(T::zero(), |s, &x| s + (x - mean) * (x - mean))
            / n;
        if !var.is_finite() {
            // overflowed statistics would otherwise normalise to zero silently
            row.fill(T::nan());
            continue;
        }
        let inv = T::one() / (var + epsilon).sqrt();
        for ((x, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *x = (*x - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Exact GELU, `x·Φ(x)` with `Φ` from the error function.
pub fn gelu<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    m.map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()))
}

pub fn add<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}
