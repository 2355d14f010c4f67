//! Logistic-regression detector and leave-one-attack-out evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::metrics::{roc, MetricsError, RocCurve};
use crate::rng::RngSeed;

#[derive(Debug, Error)]
pub enum SupervisedError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("point has dim {found}, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("leave-one-attack-out needs at least 2 attacks, got {0}")]
    TooFewAttacks(usize),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub l2_penalty: f64,
    pub max_iters: usize,
    /// Stop when the gradient norm drops below this.
    pub tol: f64,
    /// Recorded for provenance; the solver itself is deterministic.
    pub seed: RngSeed,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2_penalty: 1e-4,
            max_iters: 5000,
            tol: 1e-6,
            seed: RngSeed(0),
        }
    }
}

/// Per-feature `(x - mean) / std`, population std; a zero std becomes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        let n = rows.len() as f64;
        let d = rows.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|c| {
                let v = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
    /// False when `max_iters` ran out before the gradient tolerance.
    pub converged: bool,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    l2: f64,
}

impl Problem<'_> {
    /// Mean negative log-likelihood plus `l2/2 · |w|²`; `theta = [w, b]`.
    fn loss(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(theta.len() - 1);
        let nll: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(x, &y)| {
                let z = dot(w, x) + b[0];
                if y {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum::<f64>()
            / self.x.len() as f64;
        nll + 0.5 * self.l2 * dot(w, w)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = theta.len() - 1;
        let (w, b) = theta.split_at(d);
        let mut g = vec![0.0; d + 1];
        for (x, &y) in self.x.iter().zip(self.y) {
            let r = sigmoid(dot(w, x) + b[0]) - f64::from(u8::from(y));
            for (gk, xk) in g.iter_mut().zip(x) {
                *gk += r * xk;
            }
            g[d] += r;
        }
        let n = self.x.len() as f64;
        for (k, gk) in g.iter_mut().enumerate() {
            *gk /= n;
            if k < d {
                *gk += self.l2 * w[k];
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit result with the loss after every accepted step.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub model: LogisticModel,
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent with Armijo backtracking on standardized
/// features.
pub fn logistic_fit_traced(
    features: &FeatureMatrix,
    labels: &[bool],
    config: &LogisticConfig,
) -> Result<FitTrace, SupervisedError> {
    if features.len() != labels.len() {
        return Err(SupervisedError::LengthMismatch {
            rows: features.len(),
            labels: labels.len(),
        });
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(SupervisedError::SingleClass);
    }
    if !(config.l2_penalty >= 0.0 && config.tol > 0.0) {
        return Err(SupervisedError::BadConfig(
            "l2_penalty must be >= 0 and tol > 0".into(),
        ));
    }
    let standardizer = Standardizer::fit(features.rows());
    let x: Vec<Vec<f64>> = features.rows().iter().map(|r| standardizer.apply(r)).collect();
    let p = Problem {
        x: &x,
        y: labels,
        l2: config.l2_penalty,
    };

    let mut theta = vec![0.0; features.dim() + 1];
    let mut loss = p.loss(&theta);
    let mut losses = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let g = p.gradient(&theta);
        let gg = dot(&g, &g);
        if gg.sqrt() < config.tol {
            converged = true;
            break;
        }
        iterations += 1;
        step *= 2.0;
        let next = loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gk)| t - step * gk).collect();
            let l = p.loss(&cand);
            if l <= loss - 1e-4 * step * gg {
                break Some((cand, l));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        match next {
            Some((cand, l)) => {
                theta = cand;
                loss = l;
                losses.push(l);
            }
            None => break,
        }
    }
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations without reaching tol {}", config.tol);
    }
    let bias = theta.pop().unwrap_or(0.0);
    Ok(FitTrace {
        model: LogisticModel {
            weights: theta,
            bias,
            standardizer,
            converged,
            iterations,
        },
        losses,
    })
}

/// `labels[k]` is true for the positive (attacked) class.
pub fn logistic_fit(
    features: &FeatureMatrix,
    labels: &[bool],
    config: &LogisticConfig,
) -> Result<LogisticModel, SupervisedError> {
    Ok(logistic_fit_traced(features, labels, config)?.model)
}

/// `sigmoid(w · standardize(point) + b)`.
pub fn logistic_score(model: &LogisticModel, point: &[f64]) -> Result<f64, SupervisedError> {
    if point.len() != model.weights.len() {
        return Err(SupervisedError::DimMismatch {
            expected: model.weights.len(),
            found: point.len(),
        });
    }
    Ok(sigmoid(dot(&model.weights, &model.standardizer.apply(point)) + model.bias))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoaoConfig {
    pub logistic: LogisticConfig,
    /// Trailing share of the natural rows held out for evaluation.
    pub natural_test_fraction: f64,
}

impl Default for LoaoConfig {
    fn default() -> Self {
        LoaoConfig {
            logistic: LogisticConfig::default(),
            natural_test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoaoResult {
    pub model: LogisticModel,
    pub roc: RocCurve,
}

/// For each attack `A`: train on the leading natural rows (negatives) plus
/// every other attack (positives), then evaluate on the trailing natural
/// rows plus `A`.
pub fn leave_one_attack_out(
    natural: &FeatureMatrix,
    per_attack: &BTreeMap<String, FeatureMatrix>,
    config: &LoaoConfig,
) -> Result<BTreeMap<String, LoaoResult>, SupervisedError> {
    if per_attack.len() < 2 {
        return Err(SupervisedError::TooFewAttacks(per_attack.len()));
    }
    let f = config.natural_test_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(SupervisedError::BadConfig(format!(
            "natural_test_fraction must be in (0,1), got {f}"
        )));
    }
    let n = natural.len();
    let n_test = ((n as f64) * f).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(SupervisedError::BadConfig(format!(
            "{n} natural rows cannot be split at fraction {f}"
        )));
    }
    let nat_train = &natural.rows()[..n - n_test];
    let nat_test = &natural.rows()[n - n_test..];

    per_attack
        .par_iter()
        .map(|(left_out, held)| {
            let mut rows: Vec<Vec<f64>> = nat_train.to_vec();
            let mut labels = vec![false; rows.len()];
            for (name, fm) in per_attack {
                if name != left_out {
                    rows.extend(fm.rows().iter().cloned());
                    labels.extend(std::iter::repeat_n(true, fm.len()));
                }
            }
            let train = FeatureMatrix::from_rows(rows).map_err(|e| SupervisedError::BadConfig(e.to_string()))?;
            let model = logistic_fit(&train, &labels, &config.logistic)?;
            let mut scores = Vec::with_capacity(nat_test.len() + held.len());
            for r in nat_test.iter().chain(held.rows()) {
                scores.push(logistic_score(&model, r)?);
            }
            let mut truth = vec![false; nat_test.len()];
            truth.extend(std::iter::repeat_n(true, held.len()));
            let curve = roc(&scores, &truth)?;
            Ok((left_out.clone(), LoaoResult { model, roc: curve }))
        })
        .collect()
}
