//! Asymmetric classification loss, the combined objective
//! `alpha * LCT + ASL`, and its gradient with respect to every parameter
//! group of the toy model.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::LabelVector;
use crate::error::{Error, Result};
use crate::model::{encode, graph, AlignmentConfig, Encoded, ParamGroup, SyntheticSample, ToyModelParams};
use crate::numerics::Matrix;
use crate::transport::{layerwise_ct, NavigatorParams};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    /// Weight of the layer-wise transport term.
    pub alpha: f64,
    /// First layer (1-based) included in the layer-wise transport term.
    pub start_layer: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma_plus: 0.0, gamma_minus: 2.0, alpha: 1.0, start_layer: 1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_plus", self.gamma_plus), ("gamma_minus", self.gamma_minus), ("alpha", self.alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.start_layer == 0 {
            return Err(Error::Config("start layer is 1-based".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub lct: f64,
    pub asl: f64,
}

/// Asymmetric loss, averaged over labels:
/// `-(1/M) sum [y (1-p)^g+ ln p + (1-y) p^g- ln(1-p)]`.
pub fn asl_loss(p: &[f64], y: &LabelVector, cfg: &LossConfig) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", p.len(), y.len())));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (&p, &positive) in p.iter().zip(y.as_slice()) {
        if p.is_nan() {
            return Err(Error::Evaluation("probability is NaN".into()));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let q = -p + 1.0;
        let (log_of, weight_of, gamma) = if positive { (p, q, cfg.gamma_plus) } else { (q, p, cfg.gamma_minus) };
        let log = log_of.ln();
        terms.push(if gamma == 0.0 { log } else { weight_of.powf(gamma) * log });
    }
    let w = -1.0 / terms.len() as f64;
    Ok(terms.iter().map(|t| w * t).sum())
}

/// `alpha * LCT + ASL` for one forward pass.
pub fn combined_loss(
    outputs: &Encoded,
    y: &LabelVector,
    navigator: &NavigatorParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let lct = layerwise_ct(&outputs.patch_sets, &outputs.label_sets, navigator, cfg.start_layer)?;
    let asl = asl_loss(&outputs.probabilities, y, cfg)?;
    Ok(LossBreakdown { total: cfg.alpha * lct + asl, lct, asl })
}

/// Mean combined loss over a batch, through the plain forward pass.
pub fn batch_loss(
    params: &ToyModelParams,
    batch: &[SyntheticSample],
    align: &AlignmentConfig,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut acc = LossBreakdown { total: 0.0, lct: 0.0, asl: 0.0 };
    for s in batch {
        let enc = encode(params, &s.patches, Some(&s.labels), align)?;
        let l = combined_loss(&enc, &s.labels, &params.navigator, cfg)?;
        acc.total += l.total;
        acc.lct += l.lct;
        acc.asl += l.asl;
    }
    let n = batch.len() as f64;
    Ok(LossBreakdown { total: acc.total / n, lct: acc.lct / n, asl: acc.asl / n })
}

/// Gradient of the combined loss in the flat layout of
/// [`ToyModelParams::to_flat`], with group boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    flat: Vec<f64>,
    groups: Vec<(ParamGroup, Range<usize>)>,
}

impl GradientBundle {
    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.flat
    }

    /// Partials of one group; empty if the model lacks it.
    pub fn group(&self, group: ParamGroup) -> &[f64] {
        self.groups.iter().find(|(g, _)| *g == group).map_or(&[][..], |(_, r)| &self.flat[r.clone()])
    }

    pub fn groups(&self) -> &[(ParamGroup, Range<usize>)] {
        &self.groups
    }
}

fn objective_on_tape(
    params: &ToyModelParams,
    batch: &[(&Matrix, &LabelVector)],
    align: &AlignmentConfig,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientBundle)> {
    cfg.validate()?;
    params.validate()?;
    let mut tape = Tape::new();
    let pv = graph::load(&mut tape, params);
    let obj = graph::batch_objective(&mut tape, &pv, batch, align, cfg)?;
    let breakdown = LossBreakdown { total: tape.value(obj.total), lct: tape.value(obj.lct), asl: tape.value(obj.asl) };
    if !breakdown.total.is_finite() {
        return Err(Error::Evaluation(format!("combined loss is {}", breakdown.total)));
    }
    let adj = tape.gradient(obj.total);
    let flat = adj[pv.first..pv.first + pv.count].to_vec();
    let groups = params.group_ranges();
    for (group, range) in &groups {
        if flat[range.clone()].iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { group: group.name(), epoch: None });
        }
    }
    Ok((breakdown, GradientBundle { flat, groups }))
}

/// Loss and gradient of the mean combined loss over `batch`.
pub fn loss_gradients(
    params: &ToyModelParams,
    batch: &[SyntheticSample],
    align: &AlignmentConfig,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientBundle)> {
    let pairs: Vec<(&Matrix, &LabelVector)> = batch.iter().map(|s| (&s.patches, &s.labels)).collect();
    objective_on_tape(params, &pairs, align, cfg)
}
