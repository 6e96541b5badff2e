use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate, rng_for, AlignmentConfig, SyntheticSample, ToyModelParams, STREAM_SHUFFLE};
use crate::error::{Error, Result};
use crate::losses::{loss_gradients, LossConfig};
use crate::metrics::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs trained on the classification loss alone before the transport term joins.
    pub ct_warmup_epochs: usize,
    pub seed: u64,
    pub alignment: AlignmentConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            batch_size: 1,
            ct_warmup_epochs: 15,
            seed: 42,
            alignment: AlignmentConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return Err(Error::Config(format!("adam epsilon {}", self.adam_epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.alignment.top_k == 0 {
            return Err(Error::Config("top-k must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Training losses are means over the epoch's samples; `total` is always
/// the configured objective, warmup epochs included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub lct: f64,
    pub asl: f64,
    /// `None` without a validation split.
    pub valid_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    pub trace: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, x: &mut [f64], g: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let step = cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_epsilon);
            x[i] -= step;
        }
    }
}

/// Minibatch Adam on the mean combined loss. Sample order is reshuffled
/// every epoch from the seed's shuffle stream. During the first
/// `ct_warmup_epochs` epochs only the classification loss is descended.
pub fn train(
    params: &ToyModelParams,
    train_set: &[SyntheticSample],
    valid_set: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = rng_for(cfg.seed, STREAM_SHUFFLE);
    let mut current = params.clone();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut lct, mut asl) = (0.0, 0.0, 0.0);
        let loss_cfg = if epoch <= cfg.ct_warmup_epochs { LossConfig { alpha: 0.0, ..cfg.loss } } else { cfg.loss };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SyntheticSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = loss_gradients(&current, &batch, &cfg.alignment, &loss_cfg).map_err(|e| match e {
                Error::Numerical { group, .. } => Error::Numerical { group, epoch: Some(epoch) },
                Error::Evaluation(_) => Error::Numerical { group: "loss", epoch: Some(epoch) },
                other => other,
            })?;
            let w = chunk.len() as f64;
            total += w * (cfg.loss.alpha * loss.lct + loss.asl);
            lct += w * loss.lct;
            asl += w * loss.asl;
            if cfg.learning_rate > 0.0 {
                adam.update(&mut flat, grads.as_slice(), cfg);
                if flat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical { group: "parameters", epoch: Some(epoch) });
                }
                current = current.with_flat(&flat)?;
            }
        }
        let n = train_set.len() as f64;
        let valid_map =
            if valid_set.is_empty() { None } else { Some(evaluate(&current, valid_set, Regime::default())?.map) };
        trace.push(EpochRecord { epoch, total: total / n, lct: lct / n, asl: asl / n, valid_map });
    }
    Ok(TrainOutcome { params: current, trace })
}
