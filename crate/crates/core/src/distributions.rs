//! Weighted point sets for one image: `P` over patch embeddings with sparse,
//! label-guided weights and `Q` over label embeddings weighted by the
//! ground truth.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_stable, top_k_indices, top_k_mask, Matrix, SimplexVector};

/// Multi-hot label vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// Accepts `0`/`1` entries only.
    pub fn from_binary(values: &[u8]) -> Result<Self> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Shape(format!("label entry {i} is {other}, expected 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn from_positives(len: usize, positives: &[usize]) -> Result<Self> {
        let mut flags = alloc::vec![false; len];
        for &p in positives {
            *flags
                .get_mut(p)
                .ok_or_else(|| Error::Shape(format!("label index {p} out of range for {len} labels")))? = true;
        }
        Ok(Self(flags))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, m: usize) -> bool {
        self.0[m]
    }

    pub fn positives(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, y)| **y).map(|(i, _)| i).collect()
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|y| **y).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
    }

    /// `y / sum(y)`.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let count = self.count_positive();
        if count == 0 {
            return Err(Error::EmptyLabelSet);
        }
        let w = 1.0 / count as f64;
        Ok(self.0.iter().map(|&y| if y { w } else { 0.0 }).collect())
    }
}

/// How the top-k selection feeds the patch weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKMode {
    /// Keep the k best scores, mask the rest to `-inf`, then softmax.
    /// Exactly `min(k, N)` patches get mass.
    #[default]
    Sparse,
    /// Replace the k best scores with 1 and the rest with 0, then softmax.
    /// Dense two-level weights, and constant with respect to the scores.
    Binary,
}

/// How label weights are derived from the multi-hot vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// Uniform over positive labels, zero elsewhere.
    #[default]
    Masked,
    /// Plain softmax of the raw 0/1 vector; negatives get mass too.
    Literal,
}

/// Support points (one column each) with simplex weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePointSet {
    support: Matrix,
    weights: SimplexVector,
}

impl DiscretePointSet {
    pub fn support(&self) -> &Matrix {
        &self.support
    }

    pub fn weights(&self) -> &SimplexVector {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.support.rows()
    }

    pub fn len(&self) -> usize {
        self.support.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.support.cols() == 0
    }
}

pub fn make_point_set(support: Matrix, weights: SimplexVector) -> Result<DiscretePointSet> {
    if support.cols() != weights.len() {
        return Err(Error::Shape(format!("{} weights for {} support points", weights.len(), support.cols())));
    }
    Ok(DiscretePointSet { support, weights })
}

/// Patch weights from already computed scores `E^T o`.
pub fn theta_from_scores(scores: &[f64], k: usize, mode: TopKMode) -> Result<SimplexVector> {
    match mode {
        TopKMode::Sparse => softmax_stable(&top_k_mask(scores, k)),
        TopKMode::Binary => {
            let mut mask = alloc::vec![0.0; scores.len()];
            for i in top_k_indices(scores, k) {
                mask[i] = 1.0;
            }
            softmax_stable(&mask)
        }
    }
}

/// Label-guided patch scores `E^T (L y_hat)`.
pub fn patch_scores(patches: &Matrix, labels: &Matrix, y: &LabelVector) -> Result<Vec<f64>> {
    if patches.rows() != labels.rows() {
        return Err(Error::Shape(format!(
            "patch dimension {} differs from label dimension {}",
            patches.rows(),
            labels.rows()
        )));
    }
    if y.len() != labels.cols() {
        return Err(Error::Shape(format!("{} labels but {} label embeddings", y.len(), labels.cols())));
    }
    let y_hat = y.normalized()?;
    let o = Matrix::new(y_hat.len(), 1, y_hat).and_then(|y| labels.matmul(&y))?;
    Ok(patches.transpose().matmul(&o)?.into_vec())
}

/// Sparse label-guided patch weights.
pub fn build_theta(
    patches: &Matrix,
    labels: &Matrix,
    y: &LabelVector,
    k: usize,
    mode: TopKMode,
) -> Result<SimplexVector> {
    theta_from_scores(&patch_scores(patches, labels, y)?, k, mode)
}

pub fn build_beta(y: &LabelVector, mode: BetaMode) -> Result<SimplexVector> {
    if y.count_positive() == 0 {
        return Err(Error::EmptyLabelSet);
    }
    match mode {
        BetaMode::Masked => SimplexVector::new(y.normalized()?),
        BetaMode::Literal => softmax_stable(&y.to_f64()),
    }
}
