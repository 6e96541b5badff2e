//! Conditional transport between two weighted point sets.
//!
//! Both transport plans are closed form given the navigator distance `d`:
//! the forward plan moves each patch's mass `theta_i` onto labels through
//! a softmax over `ln beta_j - d_ij`, the backward plan moves each label's
//! mass `beta_j` onto patches through a softmax over `ln theta_i - d_ij`.
//! Every plan is stored `n x m` (patch rows, label columns), so forward rows
//! sum to `theta` and backward columns sum to `beta`.
//!
//! An entropic optimal-transport solver is kept alongside as a baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::distributions::DiscretePointSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, softmax_stable, Matrix, SimplexVector, MASKED};

/// Nonnegative transport costs, patches by labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct CostMatrix(Matrix);

impl TryFrom<Matrix> for CostMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<CostMatrix> for Matrix {
    fn from(c: CostMatrix) -> Self {
        c.0
    }
}

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| **v < 0.0) {
            return Err(Error::Shape(format!("negative transport cost {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }
}

/// Cosine distance `1 - cos(e_i, l_j)` between patch and label columns.
pub fn cost_matrix(patches: &Matrix, labels: &Matrix) -> Result<CostMatrix> {
    let sim = cosine_similarity_matrix(patches, labels)?;
    Matrix::from_fn(sim.rows(), sim.cols(), |i, j| 1.0 - sim[(i, j)]).map(CostMatrix)
}

/// Learned projections applied before the cosine in the navigator distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub patch: Matrix,
    pub label: Matrix,
}

/// Parameters of the navigator distance `d(e, l) = (1 - cos(e, l)) / tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigatorParams {
    pub log_temperature: f64,
    #[serde(default)]
    pub projections: Option<Projections>,
}

impl Default for NavigatorParams {
    fn default() -> Self {
        Self { log_temperature: 0.0, projections: None }
    }
}

impl NavigatorParams {
    pub fn with_temperature(tau: f64) -> Self {
        Self { log_temperature: tau.ln(), projections: None }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }
}

pub fn navigator_distance(patches: &Matrix, labels: &Matrix, params: &NavigatorParams) -> Result<Matrix> {
    let tau = params.temperature();
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Evaluation(format!("navigator temperature {tau}")));
    }
    let cost = match &params.projections {
        None => cost_matrix(patches, labels)?,
        Some(p) => cost_matrix(&p.patch.matmul(patches)?, &p.label.matmul(labels)?)?,
    };
    let data: Vec<f64> = cost.values().as_slice().iter().map(|c| c / tau).collect();
    Matrix::new(cost.values().rows(), cost.values().cols(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Patches to labels; rows sum to `theta`.
    Forward,
    /// Labels to patches; columns sum to `beta`.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub coupling: Matrix,
    pub direction: Direction,
}

impl TransportPlan {
    /// Expected cost `sum_ij t_ij c_ij`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.coupling.as_slice().iter().zip(cost.values().as_slice()).map(|(t, c)| t * c).sum()
    }

    /// Mass moved into patch `i` from label `label`, for every patch.
    pub fn label_column(&self, label: usize) -> Vec<f64> {
        self.coupling.column(label)
    }
}

fn check_plan_shapes(theta: &SimplexVector, beta: &SimplexVector, dist: &Matrix) -> Result<()> {
    if dist.shape() != (theta.len(), beta.len()) {
        return Err(Error::Shape(format!(
            "distance matrix is {}x{}, weights give {}x{}",
            dist.rows(),
            dist.cols(),
            theta.len(),
            beta.len()
        )));
    }
    Ok(())
}

fn log_weights(w: &SimplexVector) -> Vec<f64> {
    w.as_slice().iter().map(|&v| if v > 0.0 { v.ln() } else { MASKED }).collect()
}

pub fn forward_plan_from(theta: &SimplexVector, beta: &SimplexVector, dist: &Matrix) -> Result<TransportPlan> {
    check_plan_shapes(theta, beta, dist)?;
    let (n, m) = dist.shape();
    let log_beta = log_weights(beta);
    let mut coupling = Matrix::zeros(n, m);
    let mut logits = vec![0.0; m];
    for (i, &th) in theta.as_slice().iter().enumerate() {
        if th == 0.0 {
            continue;
        }
        for j in 0..m {
            logits[j] = log_beta[j] - dist[(i, j)];
        }
        let nav = softmax_stable(&logits)?;
        for (j, p) in nav.as_slice().iter().enumerate() {
            coupling[(i, j)] = th * p;
        }
    }
    Ok(TransportPlan { coupling, direction: Direction::Forward })
}

/// Backward plan for a symmetric distance, so `d(l_j, e_i) = dist[(i, j)]`.
pub fn backward_plan_from(theta: &SimplexVector, beta: &SimplexVector, dist: &Matrix) -> Result<TransportPlan> {
    check_plan_shapes(theta, beta, dist)?;
    let (n, m) = dist.shape();
    let log_theta = log_weights(theta);
    let mut coupling = Matrix::zeros(n, m);
    let mut logits = vec![0.0; n];
    for (j, &b) in beta.as_slice().iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for i in 0..n {
            logits[i] = log_theta[i] - dist[(i, j)];
        }
        let nav = softmax_stable(&logits)?;
        for (i, p) in nav.as_slice().iter().enumerate() {
            coupling[(i, j)] = b * p;
        }
    }
    Ok(TransportPlan { coupling, direction: Direction::Backward })
}

fn check_sets(p: &DiscretePointSet, q: &DiscretePointSet) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("point dimensions differ: {} vs {}", p.dim(), q.dim())));
    }
    Ok(())
}

pub fn forward_plan(p: &DiscretePointSet, q: &DiscretePointSet, params: &NavigatorParams) -> Result<TransportPlan> {
    check_sets(p, q)?;
    let dist = navigator_distance(p.support(), q.support(), params)?;
    forward_plan_from(p.weights(), q.weights(), &dist)
}

pub fn backward_plan(p: &DiscretePointSet, q: &DiscretePointSet, params: &NavigatorParams) -> Result<TransportPlan> {
    check_sets(p, q)?;
    let dist = navigator_distance(p.support(), q.support(), params)?;
    backward_plan_from(p.weights(), q.weights(), &dist)
}

/// Both directions of the conditional transport cost and their plans.
#[derive(Debug, Clone, PartialEq)]
pub struct CtDistance {
    pub total: f64,
    pub forward_cost: f64,
    pub backward_cost: f64,
    pub forward: TransportPlan,
    pub backward: TransportPlan,
}

/// CT cost from explicit weights, transport costs and navigator distances.
pub fn ct_from_matrices(
    theta: &SimplexVector,
    beta: &SimplexVector,
    cost: &CostMatrix,
    dist: &Matrix,
) -> Result<CtDistance> {
    if cost.values().shape() != dist.shape() {
        return Err(Error::Shape("cost and distance matrices differ in shape".into()));
    }
    let forward = forward_plan_from(theta, beta, dist)?;
    let backward = backward_plan_from(theta, beta, dist)?;
    let forward_cost = forward.cost(cost);
    let backward_cost = backward.cost(cost);
    Ok(CtDistance { total: forward_cost + backward_cost, forward_cost, backward_cost, forward, backward })
}

pub fn ct_distance(p: &DiscretePointSet, q: &DiscretePointSet, params: &NavigatorParams) -> Result<CtDistance> {
    check_sets(p, q)?;
    let cost = cost_matrix(p.support(), q.support())?;
    let dist = navigator_distance(p.support(), q.support(), params)?;
    ct_from_matrices(p.weights(), q.weights(), &cost, &dist)
}

/// Sum of CT costs over layers `start_layer..=L` (1-based).
pub fn layerwise_ct(
    patch_sets: &[DiscretePointSet],
    label_sets: &[DiscretePointSet],
    params: &NavigatorParams,
    start_layer: usize,
) -> Result<f64> {
    if patch_sets.len() != label_sets.len() || patch_sets.is_empty() {
        return Err(Error::Shape(format!("{} patch layers and {} label layers", patch_sets.len(), label_sets.len())));
    }
    if start_layer == 0 || start_layer > patch_sets.len() {
        return Err(Error::Config(format!("start layer {start_layer} outside 1..={}", patch_sets.len())));
    }
    patch_sets[start_layer - 1..]
        .iter()
        .zip(&label_sets[start_layer - 1..])
        .try_fold(0.0, |acc, (p, q)| Ok(acc + ct_distance(p, q, params)?.total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, max_iter: 1000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub cost: f64,
    pub plan: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// L1 distance of the plan's marginals from `theta` and `beta`.
    pub marginal_violation: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(MASKED, f64::max);
    if max == MASKED {
        return MASKED;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations for entropic optimal transport.
///
/// Stops once the L1 marginal violation falls below `tol`; otherwise the
/// iterate with the smallest violation is returned with `converged = false`.
pub fn sinkhorn_ot(
    theta: &SimplexVector,
    beta: &SimplexVector,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {}", cfg.epsilon)));
    }
    if cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::Config(format!("sinkhorn tolerance must be positive, got {}", cfg.tol)));
    }
    let c = cost.values();
    check_plan_shapes(theta, beta, c)?;
    let (n, m) = c.shape();
    let eps = cfg.epsilon;
    let log_a = log_weights(theta);
    let log_b = log_weights(beta);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_of = |f: &[f64], g: &[f64]| {
        let mut plan = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let e = (f[i] + g[j] - c[(i, j)]) / eps;
                plan[(i, j)] = if e == MASKED { 0.0 } else { e.exp() };
            }
        }
        plan
    };
    let violation = |plan: &Matrix| {
        let rows: f64 = plan.row_sums().iter().zip(theta.as_slice()).map(|(s, a)| (s - a).abs()).sum();
        let cols: f64 = plan.col_sums().iter().zip(beta.as_slice()).map(|(s, b)| (s - b).abs()).sum();
        rows + cols
    };

    let mut best: Option<(f64, Matrix, usize)> = None;
    for iter in 1..=cfg.max_iter.max(1) {
        for i in 0..n {
            f[i] = if log_a[i] == MASKED {
                MASKED
            } else {
                eps * (log_a[i] - log_sum_exp((0..m).map(|j| (g[j] - c[(i, j)]) / eps)))
            };
        }
        for j in 0..m {
            g[j] = if log_b[j] == MASKED {
                MASKED
            } else {
                eps * (log_b[j] - log_sum_exp((0..n).map(|i| (f[i] - c[(i, j)]) / eps)))
            };
        }
        let plan = plan_of(&f, &g);
        let v = violation(&plan);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("sinkhorn diverged at iteration {iter}")));
        }
        let improved = best.as_ref().map_or(true, |(bv, _, _)| v < *bv);
        if improved {
            best = Some((v, plan, iter));
        }
        if v < cfg.tol {
            break;
        }
    }
    let (marginal_violation, plan, iterations) = best.expect("at least one iteration runs");
    let cost = plan.as_slice().iter().zip(c.as_slice()).map(|(t, c)| t * c).sum();
    Ok(SinkhornResult { cost, plan, converged: marginal_violation < cfg.tol, iterations, marginal_violation })
}

fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Min-max normalizes a plan column, reshapes it to a `g x g` grid
/// (`g = sqrt(N)`, row-major) and resamples it bicubically to
/// `target_size x target_size`, clamped to `[0, 1]`.
pub fn export_plan_grid(column: &[f64], target_size: usize) -> Result<Matrix> {
    let n = column.len();
    let g = (n as f64).sqrt().round() as usize;
    if n == 0 || g * g != n {
        return Err(Error::Grid(format!("{n} patches do not form a square grid")));
    }
    if target_size < g {
        return Err(Error::Grid(format!("target size {target_size} is smaller than the {g}x{g} grid")));
    }
    if let Some(v) = column.iter().find(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("plan entry {v}")));
    }
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = column.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, g as isize - 1) as usize;
        let c = c.clamp(0, g as isize - 1) as usize;
        norm[r * g + c]
    };
    let scale = g as f64 / target_size as f64;
    Matrix::from_fn(target_size, target_size, |r, c| {
        // Pixel-center alignment; equal sizes reproduce the input exactly.
        let sy = (r as f64 + 0.5) * scale - 0.5;
        let sx = (c as f64 + 0.5) * scale - 0.5;
        let (y0, x0) = (sy.floor(), sx.floor());
        let mut acc = 0.0;
        for dy in -1..=2 {
            let wy = catmull_rom(sy - (y0 + dy as f64));
            if wy == 0.0 {
                continue;
            }
            for dx in -1..=2 {
                let wx = catmull_rom(sx - (x0 + dx as f64));
                acc += wy * wx * at(y0 as isize + dy, x0 as isize + dx);
            }
        }
        acc.clamp(0.0, 1.0)
    })
}
