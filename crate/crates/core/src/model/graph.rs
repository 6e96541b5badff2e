//! The training objective recorded on a [`Tape`].
//!
//! Mirrors the plain forward pass in the parent module and the transport
//! formulas in [`crate::transport`] operation for operation, so both routes
//! agree to rounding error.

use alloc::vec::Vec;

use num_traits::Float;

use super::{AlignmentConfig, ToyModelParams};
use crate::autodiff::{Tape, Var, VarMatrix};
use crate::distributions::{build_beta, theta_from_scores, LabelVector, TopKMode};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, PROB_CLAMP};
use crate::numerics::{top_k_indices, Matrix};

pub(crate) struct ParamVars {
    encoder: Vec<(VarMatrix, VarMatrix)>,
    table: VarMatrix,
    label_layers: Vec<(VarMatrix, VarMatrix)>,
    down: VarMatrix,
    up: VarMatrix,
    log_tau: Var,
    projections: Option<(VarMatrix, VarMatrix)>,
    /// Tape index of the first parameter; parameters are contiguous.
    pub first: usize,
    pub count: usize,
}

/// Records every parameter as a leaf, in the same order as
/// `ToyModelParams::to_flat`.
pub(crate) fn load(tape: &mut Tape, p: &ToyModelParams) -> ParamVars {
    let first = tape.len();
    let encoder =
        p.encoder.iter().map(|l| (VarMatrix::leaf(tape, &l.weight), VarMatrix::leaf(tape, &l.bias))).collect();
    let table = VarMatrix::leaf(tape, &p.label_table);
    let label_layers =
        p.label_layers.iter().map(|l| (VarMatrix::leaf(tape, &l.weight), VarMatrix::leaf(tape, &l.bias))).collect();
    let down = VarMatrix::leaf(tape, &p.head.down);
    let up = VarMatrix::leaf(tape, &p.head.up);
    let log_tau = tape.var(p.navigator.log_temperature);
    let projections =
        p.navigator.projections.as_ref().map(|pr| (VarMatrix::leaf(tape, &pr.patch), VarMatrix::leaf(tape, &pr.label)));
    let count = tape.len() - first;
    debug_assert_eq!(count, p.num_params());
    ParamVars { encoder, table, label_layers, down, up, log_tau, projections, first, count }
}

fn residual(tape: &mut Tape, (w, b): &(VarMatrix, VarMatrix), x: &VarMatrix) -> VarMatrix {
    let pre = w.affine(tape, x, b);
    x.zip_with(tape, &pre, |t, xi, pi| {
        let g = t.gelu(pi);
        t.add(xi, g)
    })
}

pub(crate) fn label_stack(tape: &mut Tape, pv: &ParamVars) -> Vec<VarMatrix> {
    let mut layers = Vec::with_capacity(pv.encoder.len());
    layers.push(pv.table.clone());
    for layer in &pv.label_layers {
        let next = residual(tape, layer, layers.last().expect("table pushed"));
        layers.push(next);
    }
    layers
}

pub(crate) fn patch_stack(tape: &mut Tape, pv: &ParamVars, patches: &Matrix) -> Vec<VarMatrix> {
    let (w, b) = &pv.encoder[0];
    let inputs: Vec<Vec<f64>> = (0..patches.cols()).map(|c| patches.column(c)).collect();
    let mut data = Vec::with_capacity(w.rows() * inputs.len());
    for r in 0..w.rows() {
        for col in &inputs {
            let s = tape.weighted_sum(w.row(r), col);
            data.push(tape.add(s, b.get(r, 0)));
        }
    }
    let mut layers = Vec::with_capacity(pv.encoder.len());
    layers.push(VarMatrix::from_vars(w.rows(), inputs.len(), data));
    for layer in &pv.encoder[1..] {
        let next = residual(tape, layer, layers.last().expect("first layer pushed"));
        layers.push(next);
    }
    layers
}

/// `sigmoid` inputs `Lambda^(L)^T x` with `x` the adapted mean patch.
pub(crate) fn logits(tape: &mut Tape, pv: &ParamVars, last_e: &VarMatrix, last_l: &VarMatrix) -> Vec<Var> {
    let e = last_e.column_mean(tape);
    let hidden: Vec<Var> = (0..pv.down.rows())
        .map(|r| {
            let z = tape.dot(pv.down.row(r), &e);
            tape.gelu(z)
        })
        .collect();
    let x: Vec<Var> = (0..pv.up.rows())
        .map(|r| {
            let a = tape.dot(pv.up.row(r), &hidden);
            tape.add(e[r], a)
        })
        .collect();
    last_l.columns().iter().map(|col| tape.dot(col, &x)).collect()
}

/// `1 - cos(e_i, l_j)` for every pair, indexed `[i][j]`.
fn cosine_cost(tape: &mut Tape, e: &VarMatrix, l: &VarMatrix) -> Vec<Vec<Var>> {
    let ecols = e.columns();
    let lcols = l.columns();
    let norm = |tape: &mut Tape, v: &[Var]| {
        let sq = tape.dot(v, v);
        tape.sqrt(sq)
    };
    let en: Vec<Var> = ecols.iter().map(|c| norm(tape, c)).collect();
    let ln: Vec<Var> = lcols.iter().map(|c| norm(tape, c)).collect();
    ecols
        .iter()
        .zip(&en)
        .map(|(ec, &ni)| {
            lcols
                .iter()
                .zip(&ln)
                .map(|(lc, &nj)| {
                    let dot = tape.dot(ec, lc);
                    let den = tape.mul(ni, nj);
                    let cos = tape.div(dot, den);
                    tape.affine(cos, -1.0, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Conditional transport cost between one layer's patch and label sets.
pub(crate) fn ct_layer(
    tape: &mut Tape,
    pv: &ParamVars,
    e: &VarMatrix,
    l: &VarMatrix,
    y: &LabelVector,
    align: &AlignmentConfig,
) -> Result<Var> {
    // Label-guided patch weights, kept in log space.
    let y_hat = y.normalized()?;
    let o: Vec<Var> = (0..l.rows()).map(|r| tape.weighted_sum(l.row(r), &y_hat)).collect();
    let ecols = e.columns();
    let scores: Vec<Var> = ecols.iter().map(|c| tape.dot(c, &o)).collect();
    let values: Vec<f64> = scores.iter().map(|&s| tape.value(s)).collect();
    let (support, log_theta): (Vec<usize>, Vec<Var>) = match align.theta_mode {
        TopKMode::Sparse => {
            let mut kept = top_k_indices(&values, align.top_k);
            kept.sort_unstable();
            let picked: Vec<Var> = kept.iter().map(|&i| scores[i]).collect();
            let lse = tape.log_sum_exp(&picked);
            let logs = picked.iter().map(|&s| tape.sub(s, lse)).collect();
            (kept, logs)
        }
        TopKMode::Binary => {
            let theta = theta_from_scores(&values, align.top_k, TopKMode::Binary)?;
            let logs = theta.as_slice().iter().map(|w| tape.var(w.ln())).collect();
            ((0..values.len()).collect(), logs)
        }
    };
    let theta: Vec<Var> = log_theta.iter().map(|&lt| tape.exp(lt)).collect();

    let beta = build_beta(y, align.beta_mode)?;
    let labels: Vec<usize> = beta.support();
    let log_beta: Vec<f64> = labels.iter().map(|&j| beta.as_slice()[j].ln()).collect();
    let beta_w: Vec<f64> = labels.iter().map(|&j| beta.as_slice()[j]).collect();

    let cost = cosine_cost(tape, e, l);
    let nav_cost = match &pv.projections {
        None => None,
        Some((pp, pl)) => {
            let pe = pp.matmul(tape, e);
            let plm = pl.matmul(tape, l);
            Some(cosine_cost(tape, &pe, &plm))
        }
    };
    let neg_log_tau = tape.affine(pv.log_tau, -1.0, 0.0);
    let inv_tau = tape.exp(neg_log_tau);
    let dist = |tape: &mut Tape, i: usize, j: usize| {
        let c = nav_cost.as_ref().map_or(cost[i][j], |nc| nc[i][j]);
        tape.mul(c, inv_tau)
    };

    let mut forward_rows = Vec::with_capacity(support.len());
    for (&i, &th) in support.iter().zip(&theta) {
        let logits: Vec<Var> = labels
            .iter()
            .zip(&log_beta)
            .map(|(&j, &lb)| {
                let d = dist(tape, i, j);
                tape.affine(d, -1.0, lb)
            })
            .collect();
        let lse = tape.log_sum_exp(&logits);
        let nav: Vec<Var> = logits
            .iter()
            .map(|&z| {
                let s = tape.sub(z, lse);
                tape.exp(s)
            })
            .collect();
        let costs: Vec<Var> = labels.iter().map(|&j| cost[i][j]).collect();
        let row = tape.dot(&nav, &costs);
        forward_rows.push(tape.mul(th, row));
    }
    let forward = tape.sum(&forward_rows);

    let mut backward_cols = Vec::with_capacity(labels.len());
    for &j in &labels {
        let logits: Vec<Var> = support
            .iter()
            .zip(&log_theta)
            .map(|(&i, &lt)| {
                let d = dist(tape, i, j);
                tape.sub(lt, d)
            })
            .collect();
        let lse = tape.log_sum_exp(&logits);
        let nav: Vec<Var> = logits
            .iter()
            .map(|&z| {
                let s = tape.sub(z, lse);
                tape.exp(s)
            })
            .collect();
        let costs: Vec<Var> = support.iter().map(|&i| cost[i][j]).collect();
        backward_cols.push(tape.dot(&nav, &costs));
    }
    let backward = tape.weighted_sum(&backward_cols, &beta_w);
    Ok(tape.add(forward, backward))
}

pub(crate) fn asl(tape: &mut Tape, logits: &[Var], y: &LabelVector, cfg: &LossConfig) -> Var {
    let terms: Vec<Var> = logits
        .iter()
        .zip(y.as_slice())
        .map(|(&z, &positive)| {
            let p = tape.sigmoid(z);
            let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let q = tape.affine(p, -1.0, 1.0);
            let (log_of, weight_of, gamma) = if positive { (p, q, cfg.gamma_plus) } else { (q, p, cfg.gamma_minus) };
            let log = tape.ln(log_of);
            if gamma == 0.0 {
                log
            } else {
                let w = tape.powf(weight_of, gamma);
                tape.mul(w, log)
            }
        })
        .collect();
    let w = alloc::vec![-1.0 / terms.len() as f64; terms.len()];
    tape.weighted_sum(&terms, &w)
}

pub(crate) struct Objective {
    pub total: Var,
    pub lct: Var,
    pub asl: Var,
}

/// Mean objective over a batch.
pub(crate) fn batch_objective(
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &[(&Matrix, &LabelVector)],
    align: &AlignmentConfig,
    cfg: &LossConfig,
) -> Result<Objective> {
    let layers = pv.encoder.len();
    if cfg.start_layer == 0 || cfg.start_layer > layers {
        return Err(Error::Config(alloc::format!("start layer {} outside 1..={layers}", cfg.start_layer)));
    }
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let label_layers = label_stack(tape, pv);
    let mut lcts = Vec::with_capacity(batch.len());
    let mut asls = Vec::with_capacity(batch.len());
    for (patches, y) in batch {
        if y.len() != pv.table.cols() {
            return Err(Error::Shape(alloc::format!("{} labels for a {}-label model", y.len(), pv.table.cols())));
        }
        let patch_layers = patch_stack(tape, pv, patches);
        let mut per_layer = Vec::with_capacity(layers);
        for (e, l) in patch_layers.iter().zip(&label_layers).skip(cfg.start_layer - 1) {
            per_layer.push(ct_layer(tape, pv, e, l, y, align)?);
        }
        lcts.push(tape.sum(&per_layer));
        let z = logits(tape, pv, patch_layers.last().expect("layer"), label_layers.last().expect("layer"));
        asls.push(asl(tape, &z, y, cfg));
    }
    let mean = alloc::vec![1.0 / batch.len() as f64; batch.len()];
    let lct = tape.weighted_sum(&lcts, &mean);
    let asl = tape.weighted_sum(&asls, &mean);
    let scaled = tape.affine(lct, cfg.alpha, 0.0);
    let total = tape.add(scaled, asl);
    Ok(Objective { total, lct, asl })
}
