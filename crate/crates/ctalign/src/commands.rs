//! The subcommands as library functions: each takes a resolved
//! [`RunConfig`] and an output directory, writes its artifacts there and
//! returns what it computed.

use std::fs;
use std::path::{Path, PathBuf};

use ctalign_core::metrics::Regime;
use ctalign_core::model::{
    evaluate, generate_dataset, label_navigator, localization_rate, run_experiment, ExperimentResult, SyntheticSample,
    ToyModelParams, LOCALIZATION_MASS,
};
use ctalign_core::numerics::Matrix;
use ctalign_core::transport::{cost_matrix, ct_distance, sinkhorn_ot, CtDistance, NavigatorParams, SinkhornResult};

use crate::config::{RunConfig, SweepPoint};
use crate::error::{io_error, CliError, Result};
use crate::formats::{read_embeddings, write_matrix, write_metrics, write_trace, Checkpoint, DatasetFile, MetricsRow};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const DATASET: &str = "dataset.json";
pub const TRACE: &str = "trace.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const PLAN_GRID: &str = "plan_grid.csv";

pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(io_error(out))?;
    cfg.write_effective(out)
}

#[derive(Debug, Clone)]
pub struct DistanceReport {
    pub ct: CtDistance,
    pub sinkhorn: Option<SinkhornResult>,
    /// Files whose weights were missing and taken as uniform.
    pub uniform_defaulted: Vec<PathBuf>,
    pub written: Vec<PathBuf>,
}

pub fn distance(cfg: &RunConfig, p_path: &Path, q_path: &Path, out: &Path) -> Result<DistanceReport> {
    prepare_out(out, cfg)?;
    let (p, p_default) = read_embeddings(p_path)?;
    let (q, q_default) = read_embeddings(q_path)?;
    if p.dim() != q.dim() {
        return Err(CliError::Shape(format!(
            "{} has dimension {}, {} has {}",
            p_path.display(),
            p.dim(),
            q_path.display(),
            q.dim()
        )));
    }
    let nav = NavigatorParams::with_temperature(cfg.distance.temperature);
    let ct = ct_distance(&p, &q, &nav)?;
    let sinkhorn = if cfg.distance.sinkhorn {
        let cost = cost_matrix(p.support(), q.support())?;
        Some(sinkhorn_ot(p.weights(), q.weights(), &cost, &cfg.sinkhorn)?)
    } else {
        None
    };
    let mut written = Vec::new();
    if cfg.distance.write_plans {
        let mut plans: Vec<(&str, &Matrix)> =
            vec![("forward_plan.csv", &ct.forward.coupling), ("backward_plan.csv", &ct.backward.coupling)];
        if let Some(s) = &sinkhorn {
            plans.push(("sinkhorn_plan.csv", &s.plan));
        }
        for (name, m) in plans {
            let path = out.join(name);
            write_matrix(&path, m)?;
            written.push(path);
        }
    }
    let uniform_defaulted = [(p_path, p_default), (q_path, q_default)]
        .into_iter()
        .filter(|(_, d)| *d)
        .map(|(p, _)| p.to_path_buf())
        .collect();
    Ok(DistanceReport { ct, sinkhorn, uniform_defaulted, written })
}

fn metrics_rows(run: &str, point: SweepPoint, result: &ExperimentResult) -> Vec<MetricsRow> {
    [result.threshold, result.top3]
        .into_iter()
        .map(|report| MetricsRow {
            run: run.to_string(),
            alpha: point.alpha,
            start_layer: point.start_layer,
            top_k: point.top_k,
            report,
            localization: result.localization,
        })
        .collect()
}

fn current_point(cfg: &RunConfig) -> SweepPoint {
    let t = &cfg.experiment.train;
    SweepPoint { alpha: t.loss.alpha, start_layer: t.loss.start_layer, top_k: t.alignment.top_k }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub point: SweepPoint,
    pub result: ExperimentResult,
    /// Threshold row first, then top-3.
    pub rows: Vec<MetricsRow>,
}

fn train_into(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    fs::create_dir_all(out).map_err(io_error(out))?;
    let point = current_point(cfg);
    let result = run_experiment(&cfg.experiment)?;
    Checkpoint::new(&result.params, &cfg.experiment).save(&out.join(CHECKPOINT))?;
    write_trace(&out.join(TRACE), &result.trace)?;
    let rows = metrics_rows(point.label(), point, &result);
    write_metrics(&out.join(METRICS), &rows)?;
    Ok(TrainReport { point, result, rows })
}

fn save_dataset(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.experiment;
    let data = generate_dataset(&e.dataset, e.n_train + e.n_test)?;
    DatasetFile::new(&e.dataset, &data).save(&out.join(DATASET))
}

/// One training run: dataset, checkpoint, trace and metrics in `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    prepare_out(out, cfg)?;
    save_dataset(cfg, out)?;
    train_into(cfg, out)
}

/// Every combination of the sweep grid, each in its own subdirectory, plus
/// a summary with one threshold-regime row per point.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<TrainReport>> {
    let points = cfg.sweep.points(cfg.experiment.model.num_layers)?;
    prepare_out(out, cfg)?;
    save_dataset(cfg, out)?;
    let mut reports = Vec::with_capacity(points.len());
    for point in points {
        let mut point_cfg = cfg.clone();
        let train = &mut point_cfg.experiment.train;
        train.loss.alpha = point.alpha;
        train.loss.start_layer = point.start_layer;
        train.alignment.top_k = point.top_k;
        point_cfg.validate()?;
        reports.push(train_into(&point_cfg, &out.join(point.dir_name()))?);
    }
    let summary: Vec<MetricsRow> = reports.iter().map(|r| r.rows[0].clone()).collect();
    write_metrics(&out.join(SUMMARY), &summary)?;
    Ok(reports)
}

fn held_out(ck: &Checkpoint, dataset: Option<&Path>) -> Result<Vec<SyntheticSample>> {
    let samples = match dataset {
        Some(path) => DatasetFile::load(path)?.1.samples,
        None => generate_dataset(&ck.dataset, ck.n_train + ck.n_test)?.samples,
    };
    if samples.len() <= ck.n_train {
        return Err(CliError::Config(format!(
            "dataset has {} samples, none left after the {} training samples",
            samples.len(),
            ck.n_train
        )));
    }
    Ok(samples[ck.n_train..].to_vec())
}

fn load_model(checkpoint: &Path) -> Result<(Checkpoint, ToyModelParams)> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.params()?;
    Ok((ck, params))
}

/// Metrics of a checkpoint on its held-out split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<Vec<MetricsRow>> {
    prepare_out(out, cfg)?;
    let (ck, params) = load_model(checkpoint)?;
    let test = held_out(&ck, dataset)?;
    let (localization, _) = localization_rate(&params, &test, LOCALIZATION_MASS)?;
    let point = SweepPoint {
        alpha: ck.train.loss.alpha,
        start_layer: ck.train.loss.start_layer,
        top_k: ck.train.alignment.top_k,
    };
    let rows = [Regime::Threshold(0.5), Regime::TopK(3)]
        .into_iter()
        .map(|regime| {
            Ok(MetricsRow {
                run: point.label().to_string(),
                alpha: point.alpha,
                start_layer: point.start_layer,
                top_k: point.top_k,
                report: evaluate(&params, &test, regime)?,
                localization,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_metrics(&out.join(METRICS), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ExportReport {
    pub grid: Matrix,
    /// The requested label is not among the sample's ground truth.
    pub label_absent: bool,
    pub path: PathBuf,
}

/// Final-layer backward transport column of one label for one held-out
/// sample, exported as a normalized, resampled grid.
pub fn export_plan(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    sample: usize,
    label: usize,
    out: &Path,
) -> Result<ExportReport> {
    prepare_out(out, cfg)?;
    let (ck, params) = load_model(checkpoint)?;
    let test = held_out(&ck, dataset)?;
    let s = test
        .get(sample)
        .ok_or_else(|| CliError::Shape(format!("sample {sample} out of range for {} held-out samples", test.len())))?;
    let column = label_navigator(&params, &s.patches, label)?;
    let grid = ctalign_core::transport::export_plan_grid(&column, cfg.export.target_size)?;
    let path = out.join(PLAN_GRID);
    write_matrix(&path, &grid)?;
    Ok(ExportReport { grid, label_absent: !s.labels.get(label), path })
}
