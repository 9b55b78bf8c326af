//! Dense 64-bit vector and matrix kernels.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Checked constructor: non-empty and all entries finite.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::TooFew { needed: 1, found: 0 });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::TooFew { needed: 1, found: 0 });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
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

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "matrix row",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.row_iter().zip(y) {
            axpy(yi, r, &mut out);
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Slice form of [`l2_normalize`], also returning the pre-normalization norm.
pub fn normalize_slice(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::ZeroNorm);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    normalize_slice(v).map(|(u, _)| Vector(u))
}

/// Max-subtracted softmax of `scores / temp`. Panics on an empty input or a
/// non-positive temperature.
pub fn softmax_with_temperature(scores: &[f64], temp: f64) -> Vec<f64> {
    assert!(!scores.is_empty(), "softmax of an empty score vector");
    assert!(temp > 0.0, "temperature must be positive");
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| libm::exp((s - max) / temp)).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Log of [`softmax_with_temperature`], finite even where the probability underflows.
pub fn log_softmax_with_temperature(scores: &[f64], temp: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scores.iter().map(|s| (s - max) / temp).collect();
    let lse = libm::log(shifted.iter().map(|s| libm::exp(*s)).sum::<f64>());
    shifted.into_iter().map(|s| s - lse).collect()
}

/// `F · Fᵀ`, filled from the upper triangle so the result is exactly symmetric.
pub fn gram_matrix(f: &Matrix) -> Matrix {
    let n = f.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(f.row(i), f.row(j));
            g.data[i * n + j] = v;
            g.data[j * n + i] = v;
        }
    }
    g
}
