//! Multi-label evaluation: per-class average precision, mAP, and the
//! per-class (CP/CR/CF1) and overall (OP/OR/OF1) precision-recall suite.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::distributions::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::{top_k_indices, Matrix};

/// Which labels count as predicted positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Score strictly above the threshold.
    Threshold(f64),
    /// The `k` best-scored labels of each sample.
    TopK(usize),
}

impl Default for Regime {
    fn default() -> Self {
        Regime::Threshold(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub regime: Regime,
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Non-interpolated AP: mean of precision@rank over the positive ranks.
/// Equal scores are ranked by original index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, idx) in ranking(scores).into_iter().enumerate() {
        if labels[idx] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

fn check_matrix(scores: &Matrix, labels: &[LabelVector]) -> Result<()> {
    if scores.rows() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} samples", scores.rows(), labels.len())));
    }
    if let Some(bad) = labels.iter().position(|y| y.len() != scores.cols()) {
        return Err(Error::Shape(format!(
            "sample {bad} has {} labels, scores have {}",
            labels[bad].len(),
            scores.cols()
        )));
    }
    Ok(())
}

/// Classes with at least one positive sample.
fn scored_classes(labels: &[LabelVector], classes: usize) -> Vec<usize> {
    (0..classes).filter(|&c| labels.iter().any(|y| y.get(c))).collect()
}

/// Mean AP over classes that have at least one positive.
pub fn map_score(scores: &Matrix, labels: &[LabelVector]) -> Result<f64> {
    check_matrix(scores, labels)?;
    let classes = scored_classes(labels, scores.cols());
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive sample".into()));
    }
    let mut total = 0.0;
    for &c in &classes {
        let column = scores.column(c);
        let truth: Vec<bool> = labels.iter().map(|y| y.get(c)).collect();
        total += average_precision(&column, &truth)?;
    }
    Ok(total / classes.len() as f64)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// mAP plus per-class and overall precision, recall and F1.
///
/// Per-class averages run over classes with at least one positive; a class
/// with no predicted positives has precision 0.
pub fn prf_suite(scores: &Matrix, labels: &[LabelVector], regime: Regime) -> Result<MetricsReport> {
    let map = map_score(scores, labels)?;
    let classes = scores.cols();
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    for (s, y) in labels.iter().enumerate() {
        let row = scores.row(s);
        let mut chosen = vec![false; classes];
        match regime {
            Regime::Threshold(t) => {
                for (c, v) in row.iter().enumerate() {
                    chosen[c] = *v > t;
                }
            }
            Regime::TopK(k) => {
                for c in top_k_indices(row, k) {
                    chosen[c] = true;
                }
            }
        }
        for c in 0..classes {
            predicted[c] += chosen[c] as usize;
            actual[c] += y.get(c) as usize;
            tp[c] += (chosen[c] && y.get(c)) as usize;
        }
    }
    let used = scored_classes(labels, classes);
    let count = used.len() as f64;
    let cp = used.iter().map(|&c| ratio(tp[c], predicted[c])).sum::<f64>() / count;
    let cr = used.iter().map(|&c| ratio(tp[c], actual[c])).sum::<f64>() / count;
    let op = ratio(tp.iter().sum(), predicted.iter().sum());
    let or = ratio(tp.iter().sum(), actual.iter().sum());
    Ok(MetricsReport { map, cp, cr, cf1: harmonic(cp, cr), op, or, of1: harmonic(op, or), regime })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(rows: &[&[u8]]) -> Vec<LabelVector> {
        rows.iter().map(|r| LabelVector::from_binary(r).unwrap()).collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision(&[0.9, 0.8], &[false, true]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_ties_rank_lower_index_first() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_examples() {
        let y = labels(&[&[1, 0], &[0, 1]]);
        let perfect = Matrix::new(2, 2, alloc::vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(map_score(&perfect, &y).unwrap(), 1.0);

        // Class 0 perfect; class 1 positive ranked second -> AP 0.5.
        let y = labels(&[&[1, 0], &[0, 1]]);
        let s = Matrix::new(2, 2, alloc::vec![0.9, 0.9, 0.1, 0.2]).unwrap();
        assert_eq!(map_score(&s, &y).unwrap(), 0.75);

        // Class 2 has no positives and is excluded.
        let y = labels(&[&[1, 0, 0], &[0, 1, 0]]);
        let s = Matrix::new(2, 3, alloc::vec![0.9, 0.1, 0.7, 0.2, 0.8, 0.7]).unwrap();
        assert_eq!(map_score(&s, &y).unwrap(), 1.0);

        let none = labels(&[&[0, 0]]);
        assert!(matches!(map_score(&Matrix::zeros(1, 2), &none), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn prf_examples() {
        let y = labels(&[&[1, 0, 1], &[0, 1, 0]]);
        let s = Matrix::new(2, 3, alloc::vec![0.9, 0.1, 0.8, 0.3, 0.7, 0.2]).unwrap();
        let r = prf_suite(&s, &y, Regime::Threshold(0.5)).unwrap();
        for v in [r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1] {
            assert_eq!(v, 1.0);
        }

        let y = labels(&[&[1, 1, 1, 0, 0], &[0, 0, 1, 1, 1]]);
        let s = Matrix::new(2, 5, alloc::vec![0.9, 0.8, 0.7, 0.1, 0.2, 0.1, 0.2, 0.9, 0.8, 0.7]).unwrap();
        assert_eq!(prf_suite(&s, &y, Regime::TopK(3)).unwrap().or, 1.0);

        let y = labels(&[&[1, 0], &[0, 1]]);
        let s = Matrix::new(2, 2, alloc::vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = prf_suite(&s, &y, Regime::Threshold(0.5)).unwrap();
        assert_eq!((r.op, r.or, r.of1), (0.5, 0.5, 0.5));
        // Class 1 is never predicted: precision 0 there.
        assert_eq!(r.cp, 0.5);
        assert_eq!(r.cr, 0.5);
    }

    fn problem() -> impl Strategy<Value = (Matrix, Vec<LabelVector>)> {
        (2usize..8, 2usize..5).prop_flat_map(|(n, m)| {
            (proptest::collection::vec(0.0f64..1.0, n * m), proptest::collection::vec(any::<bool>(), n * m)).prop_map(
                move |(s, y)| {
                    let mut ys: Vec<LabelVector> = y.chunks(m).map(|c| LabelVector::new(c.to_vec())).collect();
                    let mut first = ys[0].as_slice().to_vec();
                    first[0] = true;
                    ys[0] = LabelVector::new(first);
                    (Matrix::new(n, m, s).unwrap(), ys)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn ranking_metrics_invariant_to_monotone_transform((s, y) in problem(), k in 1usize..4) {
            let t = Matrix::from_fn(s.rows(), s.cols(), |r, c| (3.0 * s[(r, c)]).exp() - 7.0).unwrap();
            prop_assert_eq!(map_score(&s, &y).unwrap(), map_score(&t, &y).unwrap());
            prop_assert_eq!(prf_suite(&s, &y, Regime::TopK(k)).unwrap(), prf_suite(&t, &y, Regime::TopK(k)).unwrap());
        }

        #[test]
        fn map_invariant_to_sample_and_class_order((s, y) in problem()) {
            let n = s.rows();
            let m = s.cols();
            let rs = Matrix::from_fn(n, m, |r, c| s[(n - 1 - r, m - 1 - c)]).unwrap();
            let ry: Vec<LabelVector> = (0..n)
                .map(|r| LabelVector::new(y[n - 1 - r].as_slice().iter().rev().copied().collect()))
                .collect();
            // Reversing reorders ties; perturb scores so none remain.
            prop_assume!({
                let mut v = s.as_slice().to_vec();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[0] != w[1])
            });
            prop_assert!((map_score(&s, &y).unwrap() - map_score(&rs, &ry).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn overall_f1_between_precision_and_recall((s, y) in problem()) {
            let r = prf_suite(&s, &y, Regime::Threshold(0.5)).unwrap();
            for v in [r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if r.op > 0.0 && r.or > 0.0 {
                prop_assert!(r.of1 <= r.op.max(r.or) + 1e-12);
                prop_assert!(r.of1 >= r.op.min(r.or) - 1e-12);
            }
        }
    }
}
