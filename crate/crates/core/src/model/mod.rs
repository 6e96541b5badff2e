//! Desk-scale multi-label model.
//!
//! A small residual encoder maps raw patch features to per-layer patch
//! embeddings `E^(l)`; a learnable label table passes through per-layer
//! residual transforms to give `Lambda^(l)`. The image feature is the mean
//! of the final-layer patch embeddings plus an adaptive residual map,
//! `x = e + up * gelu(down * e)`, and label probabilities are
//! `sigmoid(Lambda^(L)^T x)`.

mod data;
mod experiment;
pub(crate) mod graph;
mod train;

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use data::{generate_dataset, DatasetConfig, SyntheticDataset, SyntheticSample};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult, LOCALIZATION_MASS};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use crate::autodiff::gelu;
use crate::distributions::{
    build_beta, build_theta, make_point_set, BetaMode, DiscretePointSet, LabelVector, TopKMode,
};
use crate::error::{Error, Result};
use crate::metrics::{prf_suite, MetricsReport, Regime};
use crate::numerics::{softmax_stable, Matrix, SimplexVector};
use crate::transport::{navigator_distance, NavigatorParams, Projections};

/// RNG stream ids derived from one seed.
pub(crate) const STREAM_DATA: u64 = 0;
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub num_labels: usize,
    /// Learn projection matrices inside the navigator distance.
    pub learnable_projection: bool,
    /// Starting navigator temperature.
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_dim: 16,
            head_dim: 8,
            num_layers: 3,
            num_labels: 6,
            learnable_projection: false,
            init_temperature: 1.0,
        }
    }
}

/// How the patch and label weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Patches kept by the top-k selection; clamped to the patch count.
    pub top_k: usize,
    pub theta_mode: TopKMode,
    pub beta_mode: BetaMode,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { top_k: 200, theta_mode: TopKMode::Sparse, beta_mode: BetaMode::Masked }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    LabelTable,
    Head,
    Navigator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Encoder, Self::LabelTable, Self::Head, Self::Navigator];

    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::LabelTable => "label_table",
            Self::Head => "head",
            Self::Navigator => "navigator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: Matrix,
    /// `out x 1`.
    pub bias: Matrix,
}

impl DenseLayer {
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.weight.matmul(x)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out[(r, c)] += self.bias[(r, 0)];
            }
        }
        Ok(out)
    }

    /// `x + gelu(W x + b)`.
    fn residual(&self, x: &Matrix) -> Result<Matrix> {
        let pre = self.forward(x)?;
        Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] + gelu(pre[(r, c)]))
    }
}

/// Two-layer adapter on the global feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveHead {
    /// `head_dim x embed_dim`.
    pub down: Matrix,
    /// `embed_dim x head_dim`.
    pub up: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    /// Layer 1 embeds raw features linearly; later layers are residual.
    pub encoder: Vec<DenseLayer>,
    /// `embed_dim x num_labels`; the layer-1 label embeddings.
    pub label_table: Matrix,
    /// Residual transforms producing label embeddings for layers 2..=L.
    pub label_layers: Vec<DenseLayer>,
    pub head: AdaptiveHead,
    pub navigator: NavigatorParams,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("initial scale {std}: {e}")))?;
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl ToyModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_layers == 0 || cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.head_dim == 0 || cfg.num_labels == 0 {
            return Err(Error::Config(format!("every model dimension must be positive: {cfg:?}")));
        }
        if !(cfg.init_temperature > 0.0 && cfg.init_temperature.is_finite()) {
            return Err(Error::Config(format!("initial temperature {}", cfg.init_temperature)));
        }
        let mut rng = rng_for(seed, STREAM_INIT);
        let d = cfg.embed_dim;
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let mut encoder = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let fan_in = if l == 0 { cfg.input_dim } else { d };
            encoder.push(DenseLayer {
                weight: gaussian(d, fan_in, inv_sqrt(fan_in), &mut rng)?,
                bias: Matrix::zeros(d, 1),
            });
        }
        let label_table = gaussian(d, cfg.num_labels, inv_sqrt(d), &mut rng)?;
        let mut label_layers = Vec::with_capacity(cfg.num_layers - 1);
        for _ in 1..cfg.num_layers {
            label_layers.push(DenseLayer { weight: gaussian(d, d, inv_sqrt(d), &mut rng)?, bias: Matrix::zeros(d, 1) });
        }
        let head = AdaptiveHead {
            down: gaussian(cfg.head_dim, d, inv_sqrt(d), &mut rng)?,
            up: gaussian(d, cfg.head_dim, 0.1 * inv_sqrt(cfg.head_dim), &mut rng)?,
        };
        let projections = if cfg.learnable_projection {
            let eye = |rng: &mut ChaCha8Rng| -> Result<Matrix> {
                let noise = gaussian(d, d, 0.1 * inv_sqrt(d), rng)?;
                Matrix::from_fn(d, d, |r, c| noise[(r, c)] + if r == c { 1.0 } else { 0.0 })
            };
            Some(Projections { patch: eye(&mut rng)?, label: eye(&mut rng)? })
        } else {
            None
        };
        Ok(Self {
            encoder,
            label_table,
            label_layers,
            head,
            navigator: NavigatorParams { log_temperature: cfg.init_temperature.ln(), projections },
        })
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.label_table.rows()
    }

    pub fn num_labels(&self) -> usize {
        self.label_table.cols()
    }

    /// Checks that every layer's shape chains with its neighbours.
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let shape = |what: &str, m: &Matrix, want: (usize, usize)| {
            if m.shape() == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what} is {}x{}, expected {}x{}", m.rows(), m.cols(), want.0, want.1)))
            }
        };
        if self.encoder.is_empty() {
            return Err(Error::Shape("model has no encoder layers".into()));
        }
        if self.label_layers.len() + 1 != self.encoder.len() {
            return Err(Error::Shape(format!(
                "{} encoder layers need {} label transforms, found {}",
                self.encoder.len(),
                self.encoder.len() - 1,
                self.label_layers.len()
            )));
        }
        for (l, layer) in self.encoder.iter().enumerate() {
            let fan_in = if l == 0 { layer.weight.cols() } else { d };
            shape("encoder weight", &layer.weight, (d, fan_in))?;
            shape("encoder bias", &layer.bias, (d, 1))?;
        }
        for layer in &self.label_layers {
            shape("label weight", &layer.weight, (d, d))?;
            shape("label bias", &layer.bias, (d, 1))?;
        }
        let h = self.head.down.rows();
        shape("head down", &self.head.down, (h, d))?;
        shape("head up", &self.head.up, (d, h))?;
        if let Some(p) = &self.navigator.projections {
            let k = p.patch.rows();
            shape("patch projection", &p.patch, (k, d))?;
            shape("label projection", &p.label, (k, d))?;
        }
        if !self.navigator.log_temperature.is_finite() {
            return Err(Error::Evaluation("navigator log-temperature is not finite".into()));
        }
        Ok(())
    }

    /// Visits every parameter block in flat order.
    fn visit(&self, mut f: impl FnMut(ParamGroup, &[f64])) {
        for layer in &self.encoder {
            f(ParamGroup::Encoder, layer.weight.as_slice());
            f(ParamGroup::Encoder, layer.bias.as_slice());
        }
        f(ParamGroup::LabelTable, self.label_table.as_slice());
        for layer in &self.label_layers {
            f(ParamGroup::LabelTable, layer.weight.as_slice());
            f(ParamGroup::LabelTable, layer.bias.as_slice());
        }
        f(ParamGroup::Head, self.head.down.as_slice());
        f(ParamGroup::Head, self.head.up.as_slice());
        f(ParamGroup::Navigator, core::slice::from_ref(&self.navigator.log_temperature));
        if let Some(p) = &self.navigator.projections {
            f(ParamGroup::Navigator, p.patch.as_slice());
            f(ParamGroup::Navigator, p.label.as_slice());
        }
    }

    fn visit_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        for layer in &mut self.encoder {
            f(ParamGroup::Encoder, layer.weight.as_mut_slice());
            f(ParamGroup::Encoder, layer.bias.as_mut_slice());
        }
        f(ParamGroup::LabelTable, self.label_table.as_mut_slice());
        for layer in &mut self.label_layers {
            f(ParamGroup::LabelTable, layer.weight.as_mut_slice());
            f(ParamGroup::LabelTable, layer.bias.as_mut_slice());
        }
        f(ParamGroup::Head, self.head.down.as_mut_slice());
        f(ParamGroup::Head, self.head.up.as_mut_slice());
        f(ParamGroup::Navigator, core::slice::from_mut(&mut self.navigator.log_temperature));
        if let Some(p) = &mut self.navigator.projections {
            f(ParamGroup::Navigator, p.patch.as_mut_slice());
            f(ParamGroup::Navigator, p.label.as_mut_slice());
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(|_, s| flat.extend_from_slice(s));
        flat
    }

    /// Same architecture with parameters replaced by `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("parameter {i} is {}", flat[i])));
        }
        let mut out = self.clone();
        let mut at = 0;
        out.visit_mut(|_, s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(out)
    }

    /// Contiguous flat ranges of each parameter group.
    pub fn group_ranges(&self) -> Vec<(ParamGroup, Range<usize>)> {
        let mut out: Vec<(ParamGroup, Range<usize>)> = Vec::new();
        let mut at = 0;
        self.visit(|g, s| {
            match out.last_mut() {
                Some((last, range)) if *last == g => range.end += s.len(),
                _ => out.push((g, at..at + s.len())),
            }
            at += s.len();
        });
        out
    }

    /// Per-layer patch embeddings `E^(1..=L)`, each `embed_dim x N`.
    pub fn patch_embeddings(&self, patches: &Matrix) -> Result<Vec<Matrix>> {
        if patches.rows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "patches have {} features, model expects {}",
                patches.rows(),
                self.input_dim()
            )));
        }
        let mut layers: Vec<Matrix> = Vec::with_capacity(self.num_layers());
        for (l, layer) in self.encoder.iter().enumerate() {
            let next = match layers.last() {
                None => layer.forward(patches)?,
                Some(prev) => layer.residual(prev)?,
            };
            debug_assert!(l == layers.len());
            layers.push(next);
        }
        Ok(layers)
    }

    /// Per-layer label embeddings `Lambda^(1..=L)`, each `embed_dim x M`.
    pub fn label_embeddings(&self) -> Result<Vec<Matrix>> {
        let mut layers = Vec::with_capacity(self.num_layers());
        layers.push(self.label_table.clone());
        for layer in &self.label_layers {
            let next = layer.residual(layers.last().expect("table pushed"))?;
            layers.push(next);
        }
        Ok(layers)
    }

    /// Global feature: mean final-layer patch embedding plus the adapter.
    pub fn global_feature(&self, last_patches: &Matrix) -> Result<Vec<f64>> {
        let n = last_patches.cols() as f64;
        let mean: Vec<f64> = (0..last_patches.rows()).map(|r| last_patches.row(r).iter().sum::<f64>() / n).collect();
        let e = Matrix::new(mean.len(), 1, mean)?;
        let hidden = self.head.down.matmul(&e)?;
        let hidden = Matrix::from_fn(hidden.rows(), 1, |r, _| gelu(hidden[(r, 0)]))?;
        let adapted = self.head.up.matmul(&hidden)?;
        Ok((0..e.rows()).map(|r| e[(r, 0)] + adapted[(r, 0)]).collect())
    }

    fn probabilities_from(&self, last_labels: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..last_labels.cols())
            .map(|j| {
                let z: f64 = (0..x.len()).map(|r| last_labels[(r, j)] * x[r]).sum();
                crate::autodiff::sigmoid(z)
            })
            .collect()
    }
}

/// Everything one forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub patch_sets: Vec<DiscretePointSet>,
    pub label_sets: Vec<DiscretePointSet>,
    pub global: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Forward pass. With ground truth the patch weights are label-guided and
/// label weights follow `beta_mode`; without it both are uniform.
pub fn encode(
    params: &ToyModelParams,
    patches: &Matrix,
    y: Option<&LabelVector>,
    align: &AlignmentConfig,
) -> Result<Encoded> {
    let es = params.patch_embeddings(patches)?;
    let ls = params.label_embeddings()?;
    let last_e = es.last().expect("at least one layer");
    let global = params.global_feature(last_e)?;
    let probabilities = params.probabilities_from(ls.last().expect("at least one layer"), &global);
    let beta = match y {
        Some(y) => build_beta(y, align.beta_mode)?,
        None => SimplexVector::uniform(params.num_labels())?,
    };
    let mut patch_sets = Vec::with_capacity(es.len());
    let mut label_sets = Vec::with_capacity(es.len());
    for (e, l) in es.into_iter().zip(ls) {
        let theta = match y {
            Some(y) => build_theta(&e, &l, y, align.top_k, align.theta_mode)?,
            None => SimplexVector::uniform(e.cols())?,
        };
        patch_sets.push(make_point_set(e, theta)?);
        label_sets.push(make_point_set(l, beta.clone())?);
    }
    Ok(Encoded { patch_sets, label_sets, global, probabilities })
}

/// Label probabilities; needs no ground truth.
pub fn predict(params: &ToyModelParams, patches: &Matrix) -> Result<Vec<f64>> {
    let es = params.patch_embeddings(patches)?;
    let ls = params.label_embeddings()?;
    let x = params.global_feature(es.last().expect("at least one layer"))?;
    Ok(params.probabilities_from(ls.last().expect("at least one layer"), &x))
}

/// `n_samples x M` probability matrix.
pub fn score_matrix(params: &ToyModelParams, samples: &[SyntheticSample]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(samples.len() * params.num_labels());
    for s in samples {
        data.extend(predict(params, &s.patches)?);
    }
    Matrix::new(samples.len(), params.num_labels(), data)
}

pub fn evaluate(params: &ToyModelParams, samples: &[SyntheticSample], regime: Regime) -> Result<MetricsReport> {
    let scores = score_matrix(params, samples)?;
    let labels: Vec<LabelVector> = samples.iter().map(|s| s.labels.clone()).collect();
    prf_suite(&scores, &labels, regime)
}

/// Conditional backward navigator of one label at the final layer: the
/// distribution over patches that label's mass is sent to. Patch weights
/// are uniform, so no ground truth is involved.
pub fn label_navigator(params: &ToyModelParams, patches: &Matrix, label: usize) -> Result<Vec<f64>> {
    if label >= params.num_labels() {
        return Err(Error::Shape(format!("label {label} out of range for {} labels", params.num_labels())));
    }
    let es = params.patch_embeddings(patches)?;
    let ls = params.label_embeddings()?;
    let dist = navigator_distance(es.last().expect("layer"), ls.last().expect("layer"), &params.navigator)?;
    let log_uniform = -(dist.rows() as f64).ln();
    let logits: Vec<f64> = (0..dist.rows()).map(|i| log_uniform - dist[(i, label)]).collect();
    Ok(softmax_stable(&logits)?.as_slice().to_vec())
}

/// For each true label, the share of its backward transport mass landing
/// on the patches that carry it.
pub fn localization_mass(params: &ToyModelParams, sample: &SyntheticSample) -> Result<Vec<(usize, f64)>> {
    sample
        .labels
        .positives()
        .into_iter()
        .map(|label| {
            let nav = label_navigator(params, &sample.patches, label)?;
            let mass = nav.iter().zip(&sample.assignment).filter(|(_, a)| **a == Some(label)).map(|(p, _)| p).sum();
            Ok((label, mass))
        })
        .collect()
}

/// Among samples whose thresholded prediction equals the ground truth, the
/// fraction where every true label puts at least `min_mass` on its own
/// patches. Returns `(fraction, correctly classified count)`.
pub fn localization_rate(params: &ToyModelParams, samples: &[SyntheticSample], min_mass: f64) -> Result<(f64, usize)> {
    let mut correct = 0usize;
    let mut localized = 0usize;
    for s in samples {
        let p = predict(params, &s.patches)?;
        let exact = p.iter().zip(s.labels.as_slice()).all(|(p, y)| (*p > 0.5) == *y);
        if !exact {
            continue;
        }
        correct += 1;
        if localization_mass(params, s)?.iter().all(|(_, m)| *m >= min_mass) {
            localized += 1;
        }
    }
    let rate = if correct == 0 { 0.0 } else { localized as f64 / correct as f64 };
    Ok((rate, correct))
}
