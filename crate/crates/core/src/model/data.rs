use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{rng_for, STREAM_DATA};
use crate::distributions::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Patch-level multi-label instance with known ground-truth layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// `input_dim x num_patches`.
    pub patches: Matrix,
    pub labels: LabelVector,
    /// Label carried by each patch; `None` marks background.
    pub assignment: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_labels: usize,
    pub input_dim: usize,
    pub num_patches: usize,
    pub noise_sigma: f64,
    pub max_labels_per_sample: usize,
    pub min_patches_per_object: usize,
    pub max_patches_per_object: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_labels: 6,
            input_dim: 16,
            num_patches: 16,
            noise_sigma: 0.3,
            max_labels_per_sample: 3,
            min_patches_per_object: 2,
            max_patches_per_object: 3,
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {}", self.num_labels)));
        }
        if self.num_patches < self.num_labels {
            return Err(Error::Config(format!("{} patches cannot host {} labels", self.num_patches, self.num_labels)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {}", self.noise_sigma)));
        }
        if self.max_labels_per_sample == 0
            || self.min_patches_per_object == 0
            || self.min_patches_per_object > self.max_patches_per_object
        {
            return Err(Error::Config("label and object patch counts must be positive and ordered".into()));
        }
        let cardinality = self.max_labels_per_sample.min(self.num_labels);
        if cardinality * self.min_patches_per_object > self.num_patches {
            return Err(Error::Config(format!(
                "{} objects of at least {} patches do not fit in {} patches",
                cardinality, self.min_patches_per_object, self.num_patches
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// `input_dim x num_labels`, unit-norm columns.
    pub prototypes: Matrix,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    /// Splits off the first `n` samples.
    pub fn split(self, n: usize) -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
        let mut samples = self.samples;
        let rest = samples.split_off(n.min(samples.len()));
        (samples, rest)
    }
}

const MAX_COVERAGE_ATTEMPTS: usize = 1000;

/// Unit prototypes per label; each sample holds 1..=max labels, every
/// object owning a few patches equal to its prototype plus Gaussian noise,
/// the remaining patches pure noise. Redraws until every label occurs.
pub fn generate_dataset(cfg: &DatasetConfig, n_samples: usize) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, STREAM_DATA);
    let prototypes = draw_prototypes(cfg, &mut rng)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
    for _ in 0..MAX_COVERAGE_ATTEMPTS {
        let samples =
            (0..n_samples).map(|_| draw_sample(cfg, &prototypes, &noise, &mut rng)).collect::<Result<Vec<_>>>()?;
        let covered = (0..cfg.num_labels).all(|m| samples.iter().any(|s| s.labels.get(m)));
        if covered {
            return Ok(SyntheticDataset { prototypes, samples });
        }
    }
    Err(Error::Config(format!("{n_samples} samples never covered all {} labels", cfg.num_labels)))
}

fn draw_prototypes(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let mut columns = Vec::with_capacity(cfg.num_labels);
    while columns.len() < cfg.num_labels {
        let v: Vec<f64> = (0..cfg.input_dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            columns.push(v.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
        }
    }
    Matrix::from_columns(cfg.input_dim, &columns)
}

fn draw_sample(
    cfg: &DatasetConfig,
    prototypes: &Matrix,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticSample> {
    let max_card = cfg.max_labels_per_sample.min(cfg.num_labels);
    let card = rng.random_range(1..=max_card);
    let mut labels: Vec<usize> = (0..cfg.num_labels).collect();
    labels.shuffle(rng);
    labels.truncate(card);
    labels.sort_unstable();

    let mut sizes: Vec<usize> =
        labels.iter().map(|_| rng.random_range(cfg.min_patches_per_object..=cfg.max_patches_per_object)).collect();
    // Shrink the largest objects until everything fits.
    while sizes.iter().sum::<usize>() > cfg.num_patches {
        let big = (0..sizes.len()).max_by_key(|&i| (sizes[i], core::cmp::Reverse(i))).expect("nonempty");
        sizes[big] -= 1;
    }

    let mut slots: Vec<usize> = (0..cfg.num_patches).collect();
    slots.shuffle(rng);
    let mut assignment = vec![None; cfg.num_patches];
    let mut next = slots.into_iter();
    for (&label, &size) in labels.iter().zip(&sizes) {
        for slot in next.by_ref().take(size) {
            assignment[slot] = Some(label);
        }
    }

    let mut patches = Matrix::zeros(cfg.input_dim, cfg.num_patches);
    for (c, owner) in assignment.iter().enumerate() {
        for r in 0..cfg.input_dim {
            let base = owner.map_or(0.0, |m| prototypes[(r, m)]);
            patches[(r, c)] = base + noise.sample(rng);
        }
    }
    Ok(SyntheticSample { patches, labels: LabelVector::from_positives(cfg.num_labels, &labels)?, assignment })
}
