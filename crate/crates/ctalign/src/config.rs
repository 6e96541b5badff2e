use std::fs;
use std::path::Path;

use ctalign_core::distributions::{BetaMode, TopKMode};
use ctalign_core::model::ExperimentConfig;
use ctalign_core::transport::SinkhornConfig;
use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::error::{io_error, CliError, Result};
use crate::formats::write_json;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Everything a run depends on. Loaded from `--config`, overridden by
/// flags, and echoed to the output directory; feeding the echo back via
/// `--config` replays the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialisation and shuffling.
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub sweep: SweepGrid,
    pub sinkhorn: SinkhornConfig,
    pub distance: DistanceOptions,
    pub export: ExportOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            experiment: ExperimentConfig::default(),
            sweep: SweepGrid::default(),
            sinkhorn: SinkhornConfig::default(),
            distance: DistanceOptions::default(),
            export: ExportOptions::default(),
        }
    }
}

/// Axes of an ablation sweep; every combination is one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub start_layer: Vec<usize>,
    pub top_k: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { alpha: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0], start_layer: vec![1], top_k: vec![200] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub start_layer: usize,
    pub top_k: usize,
}

impl SweepPoint {
    pub fn label(&self) -> &'static str {
        if self.alpha == 0.0 {
            "w/o CT"
        } else {
            "CT"
        }
    }

    pub fn dir_name(&self) -> String {
        format!("alpha{:.2}_ls{}_k{}", self.alpha, self.start_layer, self.top_k)
    }
}

impl SweepGrid {
    /// All combinations, alpha varying slowest.
    pub fn points(&self, num_layers: usize) -> Result<Vec<SweepPoint>> {
        fn distinct<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T]) -> Result<()> {
            if values.is_empty() {
                return Err(CliError::Config(format!("sweep axis `{name}` is empty")));
            }
            for (i, v) in values.iter().enumerate() {
                if values[..i].contains(v) {
                    return Err(CliError::Config(format!("sweep axis `{name}` repeats {v:?}")));
                }
            }
            Ok(())
        }
        distinct("alpha", &self.alpha)?;
        distinct("start_layer", &self.start_layer)?;
        distinct("top_k", &self.top_k)?;
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(CliError::Config(format!("sweep alpha {a} must be finite and nonnegative")));
        }
        if let Some(l) = self.start_layer.iter().find(|l| **l == 0 || **l > num_layers) {
            return Err(CliError::Config(format!("sweep start layer {l} outside 1..={num_layers}")));
        }
        if self.top_k.contains(&0) {
            return Err(CliError::Config("sweep top-k must be positive".into()));
        }
        let mut points = Vec::new();
        for &alpha in &self.alpha {
            for &start_layer in &self.start_layer {
                for &top_k in &self.top_k {
                    points.push(SweepPoint { alpha, start_layer, top_k });
                }
            }
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceOptions {
    /// Navigator temperature for the transport plans.
    pub temperature: f64,
    /// Also solve entropic OT on the same cost matrix.
    pub sinkhorn: bool,
    /// Write the plans as CSV.
    pub write_plans: bool,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self { temperature: 1.0, sinkhorn: false, write_plans: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub target_size: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { target_size: 32 }
    }
}

/// Flag values that override the loaded configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Vec<f64>,
    pub start_layer: Vec<usize>,
    pub top_k: Vec<usize>,
    pub epsilon: Option<f64>,
    pub theta_mode: Option<TopKMode>,
    pub beta_mode: Option<BetaMode>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(p, &fs::read_to_string(p).map_err(io_error(p))?),
            None => Ok(Self::default()),
        }
    }

    /// Malformed JSON is a parse error; well-formed JSON that does not fit
    /// the schema (unknown keys, wrong types) is a configuration error.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| match e.classify() {
            Category::Data => {
                CliError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
            }
            _ => {
                CliError::Parse { path: path.to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
            }
        })
    }

    /// Applies flags, then propagates the seed. Single-valued settings take
    /// the first flag value; the sweep grid takes all of them.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        let loss = &mut self.experiment.train.loss;
        let align = &mut self.experiment.train.alignment;
        if let Some(&a) = o.alpha.first() {
            loss.alpha = a;
            self.sweep.alpha = o.alpha.clone();
        }
        if let Some(&l) = o.start_layer.first() {
            loss.start_layer = l;
            self.sweep.start_layer = o.start_layer.clone();
        }
        if let Some(&k) = o.top_k.first() {
            align.top_k = k;
            self.sweep.top_k = o.top_k.clone();
        }
        if let Some(m) = o.theta_mode {
            align.theta_mode = m;
        }
        if let Some(m) = o.beta_mode {
            align.beta_mode = m;
        }
        if let Some(eps) = o.epsilon {
            self.sinkhorn.epsilon = eps;
            self.distance.sinkhorn = true;
        }
        self.experiment = self.experiment.with_seed(self.seed);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        let layers = self.experiment.model.num_layers;
        let start = self.experiment.train.loss.start_layer;
        if start == 0 || start > layers {
            return Err(CliError::Config(format!("start layer {start} outside 1..={layers}")));
        }
        if !(self.sinkhorn.epsilon > 0.0 && self.sinkhorn.epsilon.is_finite()) {
            return Err(CliError::Config(format!("sinkhorn epsilon {}", self.sinkhorn.epsilon)));
        }
        if !(self.distance.temperature > 0.0 && self.distance.temperature.is_finite()) {
            return Err(CliError::Config(format!("temperature {}", self.distance.temperature)));
        }
        if self.export.target_size == 0 {
            return Err(CliError::Config("export target size must be positive".into()));
        }
        Ok(())
    }

    pub fn write_effective(&self, out: &Path) -> Result<()> {
        write_json(&out.join(EFFECTIVE_CONFIG), self)
    }
}
