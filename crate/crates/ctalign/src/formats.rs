//! On-disk formats: embedding sets, checkpoints and datasets as JSON,
//! traces, metrics and plan grids as CSV with six-decimal floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use ctalign_core::distributions::{make_point_set, DiscretePointSet, LabelVector};
use ctalign_core::metrics::{MetricsReport, Regime};
use ctalign_core::model::{
    DatasetConfig, EpochRecord, ExperimentConfig, ModelConfig, SyntheticDataset, SyntheticSample, ToyModelParams,
    TrainConfig,
};
use ctalign_core::numerics::{Matrix, SimplexVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, Result};

pub const CHECKPOINT_KIND: &str = "ctalign-checkpoint";
pub const DATASET_KIND: &str = "ctalign-dataset";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    parse_json(path, &text)
}

pub(crate) fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into() })?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

/// A weighted point cloud: `count` points of `dim` coordinates, stored
/// row-major (one point per row). Missing weights mean uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub data: Vec<f64>,
}

impl EmbeddingFile {
    pub fn from_point_set(set: &DiscretePointSet) -> Self {
        let support = set.support().transpose();
        Self {
            dim: set.dim(),
            count: set.len(),
            weights: Some(set.weights().as_slice().to_vec()),
            data: support.into_vec(),
        }
    }

    /// Point set with one support column per point, and whether the
    /// weights were defaulted to uniform.
    pub fn into_point_set(self) -> Result<(DiscretePointSet, bool)> {
        if self.dim == 0 || self.count == 0 {
            return Err(CliError::Shape(format!("empty embedding set: dim {}, count {}", self.dim, self.count)));
        }
        let rows = Matrix::new(self.count, self.dim, self.data).map_err(|e| match e {
            ctalign_core::Error::Shape(_) => CliError::Shape(format!(
                "{} points of dimension {} need {} values",
                self.count,
                self.dim,
                self.count * self.dim
            )),
            other => other.into(),
        })?;
        let defaulted = self.weights.is_none();
        let weights = match self.weights {
            Some(w) if w.len() != self.count => {
                return Err(CliError::Shape(format!("{} weights for {} points", w.len(), self.count)))
            }
            Some(w) => SimplexVector::new(w)?,
            None => SimplexVector::uniform(self.count)?,
        };
        Ok((make_point_set(rows.transpose(), weights)?, defaulted))
    }
}

pub fn read_embeddings(path: &Path) -> Result<(DiscretePointSet, bool)> {
    read_json::<EmbeddingFile>(path)?.into_point_set()
}

/// Trained parameters in flat order, with the metadata to rebuild them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub num_params: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &ToyModelParams, experiment: &ExperimentConfig) -> Self {
        let flat = params.to_flat();
        Self {
            kind: CHECKPOINT_KIND.into(),
            version: FORMAT_VERSION,
            model: experiment.model.clone(),
            dataset: experiment.dataset.clone(),
            train: experiment.train.clone(),
            n_train: experiment.n_train,
            n_test: experiment.n_test,
            num_params: flat.len(),
            params: flat,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.kind != CHECKPOINT_KIND || ck.version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "{}: expected {CHECKPOINT_KIND} v{FORMAT_VERSION}, found {} v{}",
                path.display(),
                ck.kind,
                ck.version
            )));
        }
        if ck.params.len() != ck.num_params {
            return Err(CliError::Shape(format!("{} parameters, header says {}", ck.params.len(), ck.num_params)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn params(&self) -> Result<ToyModelParams> {
        Ok(ToyModelParams::init(&self.model, 0)?.with_flat(&self.params)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    labels: Vec<u8>,
    /// Label index per patch, `-1` for background.
    assignment: Vec<i64>,
    /// `input_dim x num_patches`, row-major.
    patches: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    kind: String,
    version: u32,
    config: DatasetConfig,
    count: usize,
    /// `input_dim x num_labels`, row-major.
    prototypes: Vec<f64>,
    samples: Vec<SampleRecord>,
}

impl DatasetFile {
    pub fn new(config: &DatasetConfig, data: &SyntheticDataset) -> Self {
        let samples = data
            .samples
            .iter()
            .map(|s| SampleRecord {
                labels: s.labels.as_slice().iter().map(|&b| b as u8).collect(),
                assignment: s.assignment.iter().map(|a| a.map_or(-1, |m| m as i64)).collect(),
                patches: s.patches.as_slice().to_vec(),
            })
            .collect();
        Self {
            kind: DATASET_KIND.into(),
            version: FORMAT_VERSION,
            config: config.clone(),
            count: data.samples.len(),
            prototypes: data.prototypes.as_slice().to_vec(),
            samples,
        }
    }

    pub fn load(path: &Path) -> Result<(DatasetConfig, SyntheticDataset)> {
        let file: DatasetFile = read_json(path)?;
        if file.kind != DATASET_KIND || file.version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "{}: expected {DATASET_KIND} v{FORMAT_VERSION}, found {} v{}",
                path.display(),
                file.kind,
                file.version
            )));
        }
        file.into_dataset()
    }

    fn into_dataset(self) -> Result<(DatasetConfig, SyntheticDataset)> {
        let cfg = self.config;
        if self.samples.len() != self.count {
            return Err(CliError::Shape(format!("{} samples, header says {}", self.samples.len(), self.count)));
        }
        let prototypes = Matrix::new(cfg.input_dim, cfg.num_labels, self.prototypes)?;
        let samples = self
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.assignment.len() != cfg.num_patches {
                    return Err(CliError::Shape(format!("sample {i}: {} assignments", s.assignment.len())));
                }
                let assignment = s
                    .assignment
                    .iter()
                    .map(|&a| match a {
                        -1 => Ok(None),
                        a if a >= 0 && (a as usize) < cfg.num_labels => Ok(Some(a as usize)),
                        a => Err(CliError::Shape(format!("sample {i}: patch label {a} out of range"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if s.labels.len() != cfg.num_labels {
                    return Err(CliError::Shape(format!("sample {i}: {} labels", s.labels.len())));
                }
                Ok(SyntheticSample {
                    patches: Matrix::new(cfg.input_dim, cfg.num_patches, s.patches)?,
                    labels: LabelVector::from_binary(&s.labels)?,
                    assignment,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((cfg, SyntheticDataset { prototypes, samples }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(io_error(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

fn finish(path: &Path, mut w: csv::Writer<fs::File>) -> Result<()> {
    w.flush().map_err(io_error(path))
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "total", "lct", "asl", "valid_map"]).map_err(csv_error(path))?;
    for r in trace {
        let map = r.valid_map.map(fmt6).unwrap_or_default();
        w.write_record([r.epoch.to_string(), fmt6(r.total), fmt6(r.lct), fmt6(r.asl), map]).map_err(csv_error(path))?;
    }
    finish(path, w)
}

pub fn regime_name(regime: Regime) -> String {
    match regime {
        Regime::Threshold(t) => format!("threshold@{t}"),
        Regime::TopK(k) => format!("top{k}"),
    }
}

/// One metrics CSV row: which run, which regime, the full report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub alpha: f64,
    pub start_layer: usize,
    pub top_k: usize,
    pub report: MetricsReport,
    pub localization: f64,
}

pub const METRICS_HEADER: [&str; 13] =
    ["run", "alpha", "start_layer", "top_k", "regime", "map", "cp", "cr", "cf1", "op", "or", "of1", "localization"];

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        let r = &self.report;
        let mut rec = vec![
            self.run.clone(),
            fmt6(self.alpha),
            self.start_layer.to_string(),
            self.top_k.to_string(),
            regime_name(r.regime),
        ];
        rec.extend([r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1, self.localization].map(fmt6));
        rec
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_error(path))?;
    }
    finish(path, w)
}

/// One CSV row per matrix row, no header.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|&v| fmt6(v))).map_err(csv_error(path))?;
    }
    finish(path, w)
}

/// Aligned plain-text table for terminal output.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = Vec::new();
    let line = |cells: Vec<&str>, out: &mut Vec<u8>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  "));
    };
    line(header.to_vec(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    String::from_utf8(out).expect("ascii table")
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(MetricsRow::record).collect();
    render_table(&METRICS_HEADER, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_roundtrip_and_defaults() {
        let text = r#"{"dim": 2, "count": 3, "data": [1, 0, 0, 1, 1, 1]}"#;
        let file: EmbeddingFile = parse_json(Path::new("p.json"), text).unwrap();
        let (set, defaulted) = file.into_point_set().unwrap();
        assert!(defaulted);
        assert_eq!(set.support().shape(), (2, 3));
        assert_eq!(set.support().column(2), vec![1.0, 1.0]);
        assert_eq!(set.weights().as_slice(), &[1.0 / 3.0; 3]);
        let back = EmbeddingFile::from_point_set(&set);
        assert_eq!(back.data, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_errors_are_classified() {
        let p = Path::new("p.json");
        let err = parse_json::<EmbeddingFile>(p, "{\n  \"dim\": 2,\n  \"count\": oops\n}").unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err}");
        let err = parse_json::<EmbeddingFile>(p, r#"{"dim": 2, "count": 1, "data": [1, 2], "extra": 0}"#).unwrap_err();
        assert!(matches!(err, CliError::Parse { .. }));
        let short: EmbeddingFile = parse_json(p, r#"{"dim": 2, "count": 2, "data": [1, 2, 3]}"#).unwrap();
        assert!(matches!(short.into_point_set(), Err(CliError::Shape(_))));
        let weights: EmbeddingFile =
            parse_json(p, r#"{"dim": 1, "count": 2, "weights": [1], "data": [1, 2]}"#).unwrap();
        assert!(matches!(weights.into_point_set(), Err(CliError::Shape(_))));
        let bad: EmbeddingFile =
            parse_json(p, r#"{"dim": 1, "count": 2, "weights": [0.2, 0.2], "data": [1, 2]}"#).unwrap();
        assert_eq!(bad.into_point_set().unwrap_err().exit_code(), crate::error::exit::INVALID_INPUT);
    }

    #[test]
    fn floats_use_six_decimals() {
        assert_eq!(fmt6(0.5378828427), "0.537883");
        assert_eq!(fmt6(1.0), "1.000000");
        assert_eq!(fmt6(-0.0000004), "-0.000000");
    }
}
