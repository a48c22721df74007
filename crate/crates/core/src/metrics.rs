//! Evaluation protocol: SROCC, PLCC and the five-parameter logistic mapping
//! applied to predictions before PLCC.
//!
//! The mapping is the standard VQEG form
//! `b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5`.

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 2000;
const PARAM_TOL: f64 = 1e-10;
const SCREEN_ITERATIONS: usize = 60;
const REFINED_STARTS: usize = 3;

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "correlation needs at least 3 samples, got {}",
            preds.len()
        )));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite value in inputs".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing the average of the ranks they span.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation: Pearson correlation of fractional ranks.
pub fn srocc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    pearson_unchecked(&fractional_ranks(preds), &fractional_ranks(labels)).ok_or_else(|| {
        Error::UndefinedMetric(format!(
            "zero rank variance over {} samples (all predictions or all labels tied)",
            preds.len()
        ))
    })
}

/// Pearson linear correlation coefficient.
pub fn plcc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    pearson_unchecked(preds, labels).ok_or_else(|| {
        Error::UndefinedMetric(format!("zero variance over {} samples", preds.len()))
    })
}

/// Evaluates the logistic mapping with parameters `beta` at `x`.
pub fn logistic_map(beta: &[f64; 5], x: f64) -> f64 {
    let s = 1.0 / (1.0 + (beta[1] * (x - beta[2])).exp());
    beta[0] * (0.5 - s) + beta[3] * x + beta[4]
}

fn jacobian_row(beta: &[f64; 5], x: f64) -> [f64; 5] {
    let s = 1.0 / (1.0 + (beta[1] * (x - beta[2])).exp());
    let ds = s * (1.0 - s);
    [0.5 - s, beta[0] * ds * (x - beta[2]), -beta[0] * ds * beta[1], x, 1.0]
}

fn sse(beta: &[f64; 5], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let r = logistic_map(beta, a) - b;
            r * r
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub beta: [f64; 5],
    pub converged: bool,
    /// Euclidean norm of the residual vector at `beta`.
    pub residual_norm: f64,
}

impl LogisticFit {
    fn identity(x: &[f64], y: &[f64]) -> Self {
        let beta = [0.0, 1.0, 0.0, 1.0, 0.0];
        Self {
            beta,
            converged: false,
            residual_norm: sse(&beta, x, y).sqrt(),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        logistic_map(&self.beta, x)
    }
}

/// Damped Gauss-Newton (Levenberg-Marquardt with diagonal scaling) from
/// `start`. Returns the best parameters seen and whether a stopping
/// criterion other than the iteration budget was met.
fn levenberg_marquardt(x: &[f64], y: &[f64], start: [f64; 5], max_iter: usize) -> ([f64; 5], f64, bool) {
    let mut beta = start;
    let mut cost = sse(&beta, x, y);
    if !cost.is_finite() {
        return (beta, cost, false);
    }
    let mut damping = 1e-3;
    for _ in 0..max_iter {
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (&a, &b) in x.iter().zip(y) {
            let j = Vector5::from(jacobian_row(&beta, a));
            let r = logistic_map(&beta, a) - b;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.amax() <= 1e-14 * (1.0 + cost) {
            return (beta, cost, true);
        }
        loop {
            let mut a = jtj;
            for i in 0..5 {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let step = a.cholesky().map(|c| c.solve(&(-jtr)));
            if let Some(step) = step {
                let mut trial = beta;
                for (t, d) in trial.iter_mut().zip(step.iter()) {
                    *t += d;
                }
                let trial_cost = sse(&trial, x, y);
                if trial_cost.is_finite() && trial_cost < cost {
                    let norm_beta = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let small = step.norm() <= PARAM_TOL * (norm_beta + PARAM_TOL);
                    beta = trial;
                    cost = trial_cost;
                    damping = (damping / 3.0).max(1e-15);
                    if small {
                        return (beta, cost, true);
                    }
                    break;
                }
            }
            damping *= 4.0;
            if damping > 1e16 {
                // no descent direction left: stationary point
                return (beta, cost, true);
            }
        }
    }
    (beta, cost, false)
}

/// Fits the logistic mapping from `preds` to `labels` by least squares and
/// returns the fit with the mapped predictions. Falls back to the identity
/// mapping (`converged = false`) when the optimizer does not converge.
pub fn logistic_map_fit(preds: &[f64], labels: &[f64]) -> Result<(LogisticFit, Vec<f64>)> {
    check_pair(preds, labels)?;
    if preds.len() < 5 {
        return Err(Error::UndefinedMetric(format!(
            "logistic fit needs at least 5 samples, got {}",
            preds.len()
        )));
    }
    let n = preds.len() as f64;
    let mean_x = preds.iter().sum::<f64>() / n;
    let mean_y = labels.iter().sum::<f64>() / n;
    let var_x = preds.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / n;
    let std_x = var_x.sqrt();
    let (lo, hi) = labels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let sign = match pearson_unchecked(preds, labels) {
        Some(r) if r < 0.0 => -1.0,
        _ => 1.0,
    };
    let b2 = if std_x > 0.0 { 1.0 / std_x } else { 1.0 };
    let primary = [sign * (hi - lo), b2, mean_x, 0.0, mean_y];

    // Further starts: the least-squares line with a vanishing logistic term,
    // then a grid over amplitude sign, center and steepness with and
    // without the linear trend.
    let cov = preds
        .iter()
        .zip(labels)
        .map(|(a, b)| (a - mean_x) * (b - mean_y))
        .sum::<f64>()
        / n;
    let slope = if var_x > 0.0 { cov / var_x } else { 0.0 };
    let intercept = mean_y - slope * mean_x;
    let mut starts = vec![
        primary,
        [sign * 1e-3 * (hi - lo).max(1e-12), b2, mean_x, slope, intercept],
    ];
    let mut sorted = preds.to_vec();
    sorted.sort_by(f64::total_cmp);
    for q in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let center = sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        for amp in [primary[0], -primary[0]] {
            for steep in [b2, 4.0 * b2] {
                starts.push([amp, steep, center, slope, intercept]);
                starts.push([amp, steep, center, 0.0, mean_y]);
            }
        }
    }

    // screen every start briefly, refine the most promising ones
    let mut screened: Vec<_> = starts
        .into_iter()
        .map(|s| levenberg_marquardt(preds, labels, s, SCREEN_ITERATIONS))
        .filter(|c| c.1.is_finite())
        .collect();
    screened.sort_by(|a, b| a.1.total_cmp(&b.1));
    let candidates: Vec<_> = screened
        .into_iter()
        .take(REFINED_STARTS)
        .map(|(beta, _, _)| levenberg_marquardt(preds, labels, beta, MAX_ITERATIONS))
        .collect();
    let best = candidates
        .iter()
        .filter(|c| c.2 && c.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let fit = match best {
        Some(&(beta, cost, _)) => LogisticFit {
            beta,
            converged: true,
            residual_norm: cost.sqrt(),
        },
        None => {
            log::warn!("logistic mapping did not converge; using identity mapping");
            LogisticFit::identity(preds, labels)
        }
    };
    let mapped = preds.iter().map(|&v| fit.apply(v)).collect();
    Ok((fit, mapped))
}

/// SROCC, raw PLCC and logistic-mapped PLCC of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub srocc: f64,
    pub plcc_raw: f64,
    pub plcc_mapped: f64,
    pub beta: [f64; 5],
    pub converged: bool,
}

impl MetricsReport {
    pub fn compute(preds: &[f64], labels: &[f64]) -> Result<Self> {
        let srocc = srocc(preds, labels)?;
        let plcc_raw = plcc(preds, labels)?;
        let (fit, mapped) = match logistic_map_fit(preds, labels) {
            Ok(r) => r,
            Err(_) => {
                let fit = LogisticFit::identity(preds, labels);
                (fit, preds.to_vec())
            }
        };
        let plcc_mapped = if fit.converged {
            plcc(&mapped, labels).unwrap_or(plcc_raw)
        } else {
            plcc_raw
        };
        Ok(Self {
            n: preds.len(),
            srocc,
            plcc_raw,
            plcc_mapped,
            beta: fit.beta,
            converged: fit.converged,
        })
    }

    /// Largest absolute difference over the numeric fields.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d = [
            self.srocc - other.srocc,
            self.plcc_raw - other.plcc_raw,
            self.plcc_mapped - other.plcc_mapped,
        ]
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
        for (a, b) in self.beta.iter().zip(&other.beta) {
            d = d.max((a - b).abs());
        }
        if self.n != other.n || self.converged != other.converged {
            d = f64::INFINITY;
        }
        d
    }
}
