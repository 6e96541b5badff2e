//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles here are written independently of the library code.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctalign::commands;
use ctalign::config::RunConfig;
use ctalign_core::distributions::{make_point_set, DiscretePointSet, LabelVector};
use ctalign_core::losses::{asl_loss, batch_loss, loss_gradients, LossConfig};
use ctalign_core::metrics::{average_precision, prf_suite, Regime};
use ctalign_core::model::{AlignmentConfig, ModelConfig, ParamGroup, SyntheticSample, ToyModelParams};
use ctalign_core::numerics::{Matrix, SimplexVector};
use ctalign_core::transport::{ct_distance, sinkhorn_ot, CostMatrix, NavigatorParams, SinkhornConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> SimplexVector {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SimplexVector::new(raw.iter().map(|w| w / total).collect()).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> DiscretePointSet {
    make_point_set(random_matrix(rng, dim, n), random_simplex(rng, n)).unwrap()
}

/// `1 - cos` between column `i` of `a` and column `j` of `b`, by loops.
fn naive_cost(a: &Matrix, b: &Matrix, i: usize, j: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for r in 0..a.rows() {
        dot += a[(r, i)] * b[(r, j)];
        na += a[(r, i)] * a[(r, i)];
        nb += b[(r, j)] * b[(r, j)];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Direct evaluation of the bidirectional CT cost with explicit sums.
fn naive_ct(p: &DiscretePointSet, q: &DiscretePointSet, tau: f64) -> f64 {
    let (theta, beta) = (p.weights().as_slice(), q.weights().as_slice());
    let (n, m) = (theta.len(), beta.len());
    let c: Vec<Vec<f64>> =
        (0..n).map(|i| (0..m).map(|j| naive_cost(p.support(), q.support(), i, j)).collect()).collect();
    let k = |i: usize, j: usize| (-c[i][j] / tau).exp();
    let mut forward = 0.0;
    for i in 0..n {
        let z: f64 = (0..m).map(|j| beta[j] * k(i, j)).sum();
        for j in 0..m {
            forward += theta[i] * beta[j] * k(i, j) / z * c[i][j];
        }
    }
    let mut backward = 0.0;
    for j in 0..m {
        let z: f64 = (0..n).map(|i| theta[i] * k(i, j)).sum();
        for i in 0..n {
            backward += beta[j] * theta[i] * k(i, j) / z * c[i][j];
        }
    }
    forward + backward
}

fn marginal_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=16);
        let (n, m) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (p, q) = (random_set(&mut rng, dim, n), random_set(&mut rng, dim, m));
        let tau = 10f64.powf(rng.random_range(-1.0..1.0));
        let ct = ct_distance(&p, &q, &NavigatorParams::with_temperature(tau)).map_err(|e| e.to_string())?;
        for (s, t) in ct.forward.coupling.row_sums().iter().zip(p.weights().as_slice()) {
            worst = worst.max((s - t).abs());
        }
        for (s, b) in ct.backward.coupling.col_sums().iter().zip(q.weights().as_slice()) {
            worst = worst.max((s - b).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-12, || format!("max marginal error {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("max marginal error {worst:.1e} in {elapsed:.2?}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let dim = rng.random_range(1..=6);
        let (n, m) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (p, q) = (random_set(&mut rng, dim, n), random_set(&mut rng, dim, m));
        let tau = rng.random_range(0.2..3.0);
        let ct = ct_distance(&p, &q, &NavigatorParams::with_temperature(tau)).map_err(|e| e.to_string())?;
        worst = worst.max((ct.total - naive_ct(&p, &q, tau)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation from nested loops {worst:.1e}"))
}

fn two_point_instance() -> (DiscretePointSet, DiscretePointSet) {
    let support = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let half = || SimplexVector::new(vec![0.5, 0.5]).unwrap();
    (make_point_set(support.clone(), half()).unwrap(), make_point_set(support, half()).unwrap())
}

fn worked_example() -> Outcome {
    let (p, q) = two_point_instance();
    let ct = ct_distance(&p, &q, &NavigatorParams::with_temperature(1.0)).map_err(|e| e.to_string())?;
    // Each direction: 2 * 0.5 * 1/(1+e) of the mass crosses at cost 1.
    let expected = 2.0 / (1.0 + std::f64::consts::E);
    ensure((ct.total - 0.537883).abs() <= 1e-6, || format!("total {}", ct.total))?;
    ensure((ct.total - expected).abs() <= 1e-12, || format!("total {} vs closed form {expected}", ct.total))?;
    Ok(format!("total {:.6} (forward {:.6}, backward {:.6})", ct.total, ct.forward_cost, ct.backward_cost))
}

fn temperature_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut hot, mut cold, mut checked) = (0.0_f64, 1.0_f64, 0);
    while checked < 100 {
        let dim = rng.random_range(2..=8);
        let (n, m) = (rng.random_range(1..=8), rng.random_range(2..=8));
        let (p, q) = (random_set(&mut rng, dim, n), random_set(&mut rng, dim, m));
        let costs: Vec<Vec<f64>> =
            (0..n).map(|i| (0..m).map(|j| naive_cost(p.support(), q.support(), i, j)).collect()).collect();
        let gap_ok = costs.iter().all(|row| {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[1] - sorted[0] > 0.05
        });
        if !gap_ok {
            continue;
        }
        checked += 1;
        let (theta, beta) = (p.weights().as_slice(), q.weights().as_slice());
        let wide = ct_distance(&p, &q, &NavigatorParams::with_temperature(1e6)).map_err(|e| e.to_string())?;
        for (i, t) in theta.iter().enumerate() {
            for (j, b) in beta.iter().enumerate() {
                let outer = t * b;
                hot = hot.max((wide.forward.coupling[(i, j)] - outer).abs());
                hot = hot.max((wide.backward.coupling[(i, j)] - outer).abs());
            }
        }
        let sharp = ct_distance(&p, &q, &NavigatorParams::with_temperature(1e-3)).map_err(|e| e.to_string())?;
        for (i, row) in costs.iter().enumerate() {
            let nearest = (0..m).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            cold = cold.min(sharp.forward.coupling[(i, nearest)] / theta[i]);
        }
    }
    ensure(hot <= 1e-5, || format!("tau=1e6 deviation from outer product {hot:e}"))?;
    ensure(cold >= 1.0 - 1e-5, || format!("tau=1e-3 nearest-target share {cold}"))?;
    Ok(format!("tau=1e6 deviation {hot:.1e}; tau=1e-3 min nearest share {cold:.8}"))
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, patches: usize, size: usize) -> Vec<SyntheticSample> {
    (0..size)
        .map(|_| {
            let mut flags: Vec<bool> = (0..cfg.num_labels).map(|_| rng.random_bool(0.5)).collect();
            if !flags.contains(&true) {
                flags[rng.random_range(0..cfg.num_labels)] = true;
            }
            SyntheticSample {
                patches: random_matrix(rng, cfg.input_dim, patches),
                labels: LabelVector::new(flags),
                assignment: vec![None; patches],
            }
        })
        .collect()
}

/// Central differences of the plain forward pass, per parameter group.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0_f64; 4];
    let h = 1e-5;
    for instance in 0..20 {
        let cfg = ModelConfig {
            input_dim: rng.random_range(2..=5),
            embed_dim: rng.random_range(2..=5),
            head_dim: rng.random_range(1..=3),
            num_layers: rng.random_range(1..=3),
            num_labels: rng.random_range(2..=4),
            learnable_projection: instance % 2 == 1,
            init_temperature: rng.random_range(0.3..2.0),
        };
        let params = ToyModelParams::init(&cfg, instance).map_err(|e| e.to_string())?;
        let patches = rng.random_range(2..=5);
        let size = rng.random_range(1..=2);
        let batch = random_batch(&mut rng, &cfg, patches, size);
        let align = AlignmentConfig { top_k: rng.random_range(1..=patches), ..Default::default() };
        let loss = LossConfig {
            alpha: rng.random_range(0.2..1.5),
            start_layer: rng.random_range(1..=cfg.num_layers),
            gamma_plus: rng.random_range(0.0..1.0),
            gamma_minus: rng.random_range(1.0..3.0),
        };
        let (_, grads) = loss_gradients(&params, &batch, &align, &loss).map_err(|e| e.to_string())?;
        let flat = params.to_flat();
        let f = |x: &[f64]| batch_loss(&params.with_flat(x).unwrap(), &batch, &align, &loss).unwrap().total;
        for (group, range) in params.group_ranges() {
            let slot = ParamGroup::ALL.iter().position(|g| *g == group).unwrap();
            let mut probe = flat.clone();
            for i in range {
                probe[i] = flat[i] + h;
                let plus = f(&probe);
                probe[i] = flat[i] - h;
                let minus = f(&probe);
                probe[i] = flat[i];
                let fd = (plus - minus) / (2.0 * h);
                worst[slot] = worst[slot].max((grads.as_slice()[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    let elapsed = start.elapsed();
    let summary: Vec<String> =
        ParamGroup::ALL.iter().zip(worst).map(|(g, w)| format!("{} {w:.1e}", g.name())).collect();
    ensure(worst.iter().all(|w| *w <= 1e-4), || format!("relative errors {summary:?}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {} in {elapsed:.2?}", summary.join(", ")))
}

fn asl_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let plain = LossConfig { gamma_plus: 0.0, gamma_minus: 0.0, ..Default::default() };
    let mut worst = 0.0_f64;
    for _ in 0..500 {
        let m = rng.random_range(1..=10);
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<bool> = (0..m).map(|_| rng.random_bool(0.4)).collect();
        let bce = -p.iter().zip(&y).map(|(p, y)| if *y { p.ln() } else { (1.0 - p).ln() }).sum::<f64>() / m as f64;
        let asl = asl_loss(&p, &LabelVector::new(y), &plain).map_err(|e| e.to_string())?;
        worst = worst.max((asl - bce).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation from cross-entropy {worst:e}"))?;
    let defaults = LossConfig::default();
    let cases = [(1.0 - 1e-7, true, 0.0), (0.9, true, 0.105361), (0.5, false, 0.173287)];
    for (p, y, expected) in cases {
        let got = asl_loss(&[p], &LabelVector::new(vec![y]), &defaults).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 1e-6, || format!("p={p} y={y}: {got} vs {expected}"))?;
    }
    Ok(format!("cross-entropy deviation {worst:.1e}; 3 examples within 1e-6"))
}

fn sinkhorn() -> Outcome {
    let half = SimplexVector::new(vec![0.5, 0.5]).unwrap();
    let cost = CostMatrix::new(Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let cfg = SinkhornConfig { epsilon: 0.01, ..Default::default() };
    let r = sinkhorn_ot(&half, &half, &cost, &cfg).map_err(|e| e.to_string())?;
    // Independent marginal check on the returned plan.
    let violation =
        r.plan.row_sums().iter().chain(r.plan.col_sums().iter()).map(|s| (s - 0.5).abs()).fold(0.0, f64::max);
    ensure(r.cost <= 0.02, || format!("cost {}", r.cost))?;
    ensure(r.plan[(0, 0)] >= 0.49 && r.plan[(1, 1)] >= 0.49, || format!("plan {:?}", r.plan))?;
    ensure(violation <= 1e-6 && r.marginal_violation <= 1e-6, || format!("violation {violation:e}"))?;
    Ok(format!("cost {:.2e}, diagonal {:.6}/{:.6}, violation {violation:.1e}", r.cost, r.plan[(0, 0)], r.plan[(1, 1)]))
}

fn metrics() -> Outcome {
    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).map_err(|e| e.to_string())?;
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12, || format!("AP {ap}"))?;
    let truth = vec![LabelVector::new(vec![true, false]), LabelVector::new(vec![false, true])];
    let pred = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let pooled = prf_suite(&pred, &truth, Regime::Threshold(0.5)).map_err(|e| e.to_string())?;
    ensure(pooled.op == 0.5 && pooled.or == 0.5 && pooled.of1 == 0.5, || format!("pooled {pooled:?}"))?;
    let perfect = Matrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    for regime in [Regime::Threshold(0.5), Regime::TopK(1)] {
        let r = prf_suite(&perfect, &truth, regime).map_err(|e| e.to_string())?;
        let all = [r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1];
        ensure(all.iter().all(|v| *v == 1.0), || format!("perfect predictions under {regime:?}: {r:?}"))?;
    }
    Ok(format!("AP {ap:.6}; OP/OR/OF1 {}/{}/{}; perfect predictions all 1.0", pooled.op, pooled.or, pooled.of1))
}

struct Runs {
    without: commands::TrainReport,
    with: commands::TrainReport,
    elapsed: Duration,
    identical: Result<(), String>,
}

/// Default experiment at alpha 0 and twice at alpha 1, through the same
/// code path as `ctalign train`.
fn default_runs() -> Result<Runs, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = RunConfig::default();
    let at = |alpha: f64| {
        let mut cfg = base.clone();
        cfg.experiment.train.loss.alpha = alpha;
        cfg
    };
    let start = Instant::now();
    let without = commands::train(&at(0.0), &root.path().join("a0")).map_err(|e| e.to_string())?;
    let with = commands::train(&at(1.0), &root.path().join("a1")).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    commands::train(&at(1.0), &root.path().join("a1_again")).map_err(|e| e.to_string())?;
    let identical =
        [commands::CHECKPOINT, commands::TRACE, commands::METRICS, commands::DATASET].iter().try_for_each(|file| {
            let a = fs::read(root.path().join("a1").join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(root.path().join("a1_again").join(file)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{file} differs between runs"))
        });
    Ok(Runs { without, with, elapsed, identical })
}

fn end_to_end(runs: &Result<Runs, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let (m0, m1) = (runs.without.result.threshold.map, runs.with.result.threshold.map);
    let loc = runs.with.result.localization;
    let detail = format!(
        "mAP w/o CT {m0:.4}, CT {m1:.4}; localization {loc:.3} over {} samples; {:.1?} for both runs",
        runs.with.result.correctly_classified, runs.elapsed
    );
    ensure(m1 > m0, || format!("CT does not improve mAP: {detail}"))?;
    ensure(m1 >= 0.95, || format!("CT mAP below 0.95: {detail}"))?;
    ensure(loc >= 0.8, || format!("localization below 0.8: {detail}"))?;
    ensure(runs.elapsed <= Duration::from_secs(300), || format!("over budget: {detail}"))?;
    Ok(detail)
}

fn determinism(runs: &Result<Runs, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    runs.identical.clone()?;
    Ok("checkpoint, trace, metrics and dataset byte-identical across two seed-42 runs".into())
}

fn main() -> ExitCode {
    let runs = default_runs();
    let results: Vec<(&str, Outcome)> = vec![
        ("marginal identities", marginal_identities()),
        ("nested-loop oracle", oracle_equivalence()),
        ("worked example", worked_example()),
        ("temperature limits", temperature_limits()),
        ("gradient correctness", gradient_correctness()),
        ("asl reductions", asl_reductions()),
        ("sinkhorn", sinkhorn()),
        ("metrics", metrics()),
        ("synthetic experiment", end_to_end(&runs)),
        ("determinism", determinism(&runs)),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
