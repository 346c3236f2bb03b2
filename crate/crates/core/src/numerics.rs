//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! Vectors are 1-column matrices. In batched code a matrix with `B` columns
//! holds one example per column.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub left: (usize, usize),
    pub right: (usize, usize),
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// U(-s, s) with s = sqrt(6 / (rows + cols)).
    UniformScaled,
    Zeros,
}

impl Matrix {
    /// Builds a matrix from row-major data. Both dimensions must be positive.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(ShapeError {
                op: "new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += k * other`; shapes must agree.
    pub fn axpy(&mut self, k: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix, ShapeError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(ShapeError {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix, ShapeError> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        for p in parts {
            if p.rows != rows {
                return Err(ShapeError {
                    op: "hstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, ShapeError> {
        matmul(self, other)
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, ShapeError> {
    if a.cols != b.rows {
        return Err(ShapeError {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_acc(&mut out, a, b);
    Ok(out)
}

/// `acc += a * b`. Panics on shape mismatch.
pub(crate) fn gemm_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert!(
        a.cols == b.rows && acc.rows == a.rows && acc.cols == b.cols,
        "gemm_acc: {:?} * {:?} into {:?}",
        a.shape(),
        b.shape(),
        acc.shape()
    );
    let p = b.cols;
    for i in 0..a.rows {
        let out_row = &mut acc.data[i * p..(i + 1) * p];
        for (l, &a_il) in a.row(i).iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b.data[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// `acc += aᵀ * b`.
pub(crate) fn gemm_tn_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert!(
        a.rows == b.rows && acc.rows == a.cols && acc.cols == b.cols,
        "gemm_tn_acc: {:?}ᵀ * {:?} into {:?}",
        a.shape(),
        b.shape(),
        acc.shape()
    );
    let p = b.cols;
    for l in 0..a.rows {
        let b_row = &b.data[l * p..(l + 1) * p];
        for (i, &a_li) in a.row(l).iter().enumerate() {
            if a_li == 0.0 {
                continue;
            }
            let out_row = &mut acc.data[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_li * bv;
            }
        }
    }
}

/// `acc += a * bᵀ`.
pub(crate) fn gemm_nt_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert!(
        a.cols == b.cols && acc.rows == a.rows && acc.cols == b.rows,
        "gemm_nt_acc: {:?} * {:?}ᵀ into {:?}",
        a.shape(),
        b.shape(),
        acc.shape()
    );
    let k = acc.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..k {
            let dot: f64 = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            acc.data[i * k + j] += dot;
        }
    }
}

pub fn elementwise(op: ElementwiseOp, a: &Matrix, b: &Matrix) -> Result<Matrix, ShapeError> {
    if a.shape() != b.shape() {
        let name = match op {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Hadamard => "hadamard",
        };
        return Err(ShapeError {
            op: name,
            left: a.shape(),
            right: b.shape(),
        });
    }
    let f = match op {
        ElementwiseOp::Add => |x: f64, y: f64| x + y,
        ElementwiseOp::Sub => |x: f64, y: f64| x - y,
        ElementwiseOp::Hadamard => |x: f64, y: f64| x * y,
    };
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(kind: Activation, a: &Matrix) -> Matrix {
    match kind {
        Activation::Sigmoid => a.map(sigmoid),
        Activation::Tanh => a.map(f64::tanh),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("softmax of an empty vector")]
pub struct EmptyInput;

/// Numerically stable softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>, EmptyInput> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x.is_empty() {
        return Err(EmptyInput);
    }
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Log-softmax, also stable for entries equal to `-inf` as long as one is finite.
pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>, EmptyInput> {
    if x.is_empty() {
        return Err(EmptyInput);
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|&v| v - lse).collect())
}

/// Seeded generator. Same seed, same stream.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, explicit so the stream consumption is pinned here.
        for i in (1..items.len()).rev() {
            let j = self.0.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, scheme: InitScheme) -> Matrix {
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::UniformScaled => {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform(-s, s))
        }
    }
}
