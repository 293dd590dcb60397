use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Penalized log-likelihood; `beta = [bias, w...]`.
fn objective(z: &[Vec<f64>], y: &[f64], beta: &[f64], ridge: f64) -> f64 {
    let mut ll = 0.0;
    for (row, &t) in z.iter().zip(y) {
        let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        ll += t * eta - softplus(eta);
    }
    ll - 0.5 * ridge * beta[1..].iter().map(|w| w * w).sum::<f64>()
}

/// Ridge-penalized logistic regression on standardized features, fitted by
/// Newton/IRLS with step halving. The intercept is not penalized.
pub fn logistic_fit(features: &[Vec<f64>], labels: &[f64], ridge: f64) -> Result<LogisticModel> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::dim("logistic_fit", &[n], &[labels.len()]));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Parameter(format!("ridge must be >= 0, got {ridge}")));
    }
    if labels.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Parameter("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&t| t == 1.0).count();
    if n < 2 || positives == 0 || positives == n {
        return Err(Error::DegenerateLabels(format!("{positives} positives among {n} samples")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::dim("logistic_fit", &[n, d], &[n, features.iter().map(Vec::len).max().unwrap_or(0)]));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic_fit"));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("feature {j} is constant")));
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();

    let p = d + 1;
    let mut beta = vec![0.0; p];
    let mut current = objective(&z, labels, &beta, ridge);
    let mut last_update = f64::INFINITY;
    for iter in 1..=IRLS_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        for (row, &t) in z.iter().zip(labels) {
            let x: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            for i in 0..p {
                grad[i] += (t - mu) * x[i];
                for j in 0..p {
                    info[(i, j)] += w * x[i] * x[j];
                }
            }
        }
        for i in 1..p {
            grad[i] -= ridge * beta[i];
            info[(i, i)] += ridge;
        }
        // tiny jitter keeps the bias row solvable once the fit saturates
        for i in 0..p {
            info[(i, i)] += 1e-12;
        }
        let step = info
            .cholesky()
            .ok_or_else(|| Error::Convergence {
                iterations: iter,
                max_update: last_update,
            })?
            .solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let value = objective(&z, labels, &trial, ridge);
            if value >= current - 1e-12 * current.abs().max(1.0) {
                last_update = trial.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                beta = trial;
                current = value.max(current);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            last_update = 0.0;
        }
        if last_update < IRLS_TOL {
            return Ok(LogisticModel {
                weights: beta[1..].to_vec(),
                bias: beta[0],
                mean,
                std,
                iterations: iter,
                converged: true,
            });
        }
    }
    Err(Error::Convergence {
        iterations: IRLS_MAX_ITER,
        max_update: last_update,
    })
}

/// `sigmoid(w·standardize(x) + b)`.
pub fn logistic_predict(model: &LogisticModel, features: &[f64]) -> Result<f64> {
    if features.len() != model.weights.len() {
        return Err(Error::dim("logistic_predict", &[model.weights.len()], &[features.len()]));
    }
    let eta = model.bias
        + features
            .iter()
            .enumerate()
            .map(|(j, x)| model.weights[j] * (x - model.mean[j]) / model.std[j])
            .sum::<f64>();
    Ok(sigmoid(eta))
}
