//! Dense numeric primitives: a row-major matrix, probability vectors, a
//! masked stable softmax, top-k masking, cosine similarity and a
//! central-difference gradient checker.
//!
//! Masked positions are carried as `f64::NEG_INFINITY` so that softmax
//! produces exact zeros there.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for a masked score.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Tolerance on `sum(weights) == 1` accepted by [`SimplexVector::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from a closure; the closure must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Builds a `dim x columns.len()` matrix, one column per input vector.
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if let Some(bad) = columns.iter().position(|c| c.len() != dim) {
            return Err(Error::Shape(format!("column {bad} has length {}, expected {dim}", columns[bad].len())));
        }
        Self::from_fn(dim, columns.len(), |r, c| columns[c][r])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.data[k * rhs.cols + c];
                }
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sq.iter_mut().zip(self.row(r)) {
                *s += v * v;
            }
        }
        sq.into_iter().map(Float::sqrt).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.0
    }
}

impl SimplexVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Simplex("empty weight vector".into()));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Simplex(format!("weight {i} is {}", weights[i])));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Simplex(format!("weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Simplex("empty weight vector".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices carrying strictly positive mass.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(i, _)| i).collect()
    }
}

/// Softmax that tolerates `-inf` entries, which receive exactly zero mass.
pub fn softmax_stable(scores: &[f64]) -> Result<SimplexVector> {
    if scores.is_empty() {
        return Err(Error::Shape("softmax of an empty sequence".into()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::Evaluation(format!("score {i} is {}", scores[i])));
    }
    let max = scores.iter().copied().filter(|s| s.is_finite()).fold(MASKED, f64::max);
    if max == MASKED {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = scores.iter().map(|&s| if s == MASKED { 0.0 } else { (s - max).exp() }).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(SimplexVector(out))
}

/// Indices of the `k` largest scores, ordered by decreasing score. Ties at
/// equal score go to the lower index. `k` is clamped to `[1, len]`.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.clamp(1, scores.len().max(1)).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Keeps the `k` largest scores verbatim and masks every other entry.
pub fn top_k_mask(scores: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![MASKED; scores.len()];
    for i in top_k_indices(scores, k) {
        out[i] = scores[i];
    }
    out
}

/// Cosine similarity between every column of `a` (`d x n`) and every column
/// of `b` (`d x m`), as an `n x m` matrix.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", a.rows(), b.rows())));
    }
    let na = nonzero_norms(a, "left")?;
    let nb = nonzero_norms(b, "right")?;
    let dots = a.transpose().matmul(b)?;
    Matrix::from_fn(a.cols(), b.cols(), |i, j| (dots[(i, j)] / (na[i] * nb[j])).clamp(-1.0, 1.0))
}

fn nonzero_norms(m: &Matrix, side: &'static str) -> Result<Vec<f64>> {
    let norms = m.column_norms();
    match norms.iter().position(|n| *n == 0.0) {
        Some(column) => Err(Error::DegenerateVector { side, column }),
        None => Ok(norms),
    }
}

/// Largest per-coordinate discrepancy between an analytic gradient and
/// central differences, measured as `|g - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F, G>(f: F, grad: G, point: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(point);
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!("gradient has {} entries for {} parameters", analytic.len(), point.len())));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        probe[i] = point[i] + FD_STEP;
        let plus = f(&probe);
        probe[i] = point[i] - FD_STEP;
        let minus = f(&probe);
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("objective not finite around coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        if !analytic[i].is_finite() {
            return Err(Error::Evaluation(format!("analytic gradient {i} is {}", analytic[i])));
        }
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
