//! ROC curves and AUROC.
//!
//! Two implementations are kept side by side: trapezoidal integration of the
//! empirical ROC curve, and the Mann–Whitney U statistic from mid-ranks. Both
//! accumulate twice the area as an exact integer and divide once by `2·P·N`,
//! so they return the same float for the same input.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Decreasing thresholds; the first is `+inf` (nothing predicted positive).
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

fn check(scores: &[f64], labels: &[f64], op: &'static str) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(op, &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    let mut pos = 0u64;
    for &y in labels {
        if y == 1.0 {
            pos += 1;
        } else if y != 0.0 {
            return Err(Error::Parameter(format!("{op}: labels must be 0 or 1, got {y}")));
        }
    }
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc(op));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Cumulative (fp, tp) counts after each distinct threshold, starting at (0, 0).
fn operating_points(scores: &[f64], labels: &[f64]) -> (Vec<f64>, Vec<(u64, u64)>) {
    let order = descending(scores);
    let mut thresholds = vec![f64::INFINITY];
    let mut points = vec![(0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        points.push((fp, tp));
    }
    (thresholds, points)
}

/// Empirical ROC curve. A subject is predicted positive when `score >= threshold`.
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Result<RocCurve> {
    let (p, n) = check(scores, labels, "roc_curve")?;
    let (thresholds, points) = operating_points(scores, labels);
    Ok(RocCurve {
        thresholds,
        tpr: points.iter().map(|&(_, tp)| tp as f64 / p as f64).collect(),
        fpr: points.iter().map(|&(fp, _)| fp as f64 / n as f64).collect(),
    })
}

/// AUROC by trapezoidal integration of the ROC curve.
pub fn auroc_trapezoid(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (p, n) = check(scores, labels, "auroc")?;
    let (_, points) = operating_points(scores, labels);
    // each trapezoid contributes (fp1 - fp0)(tp1 + tp0) / 2 in count units
    let twice: u128 = points
        .windows(2)
        .map(|w| u128::from(w[1].0 - w[0].0) * u128::from(w[1].1 + w[0].1))
        .sum();
    Ok(twice as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

/// AUROC as the Mann–Whitney statistic, computed from mid-ranks.
pub fn auroc_mann_whitney(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (p, n) = check(scores, labels, "auroc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled mid-ranks stay integral: a tie block at 1-based ranks lo..=hi gets lo + hi
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let p128 = u128::from(p);
    let twice_u = twice_rank_sum - p128 * (p128 + 1);
    Ok(twice_u as f64 / (2 * p128 * u128::from(n)) as f64)
}

/// AUROC used throughout the harness (trapezoidal form).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    auroc_trapezoid(scores, labels)
}
