//! Accuracy, prediction-certainty scores and error-coverage curves.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::train::argmax_rows;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: alloc::vec![predictions.len()],
            rhs: alloc::vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyReduction("accuracy"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| math::exp(v - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Highest softmax probability of each row of `[n, classes]` logits.
pub fn max_softmax(logits: &Tensor) -> Vec<f64> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|r| softmax_row(r).into_iter().fold(0.0, f64::max))
        .collect()
}

/// Sample variance (denominator `n - 1`); zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Ensemble certainty: the negated variance across members of the softmax
/// probability of the ensemble's predicted class, from per-member
/// log-softmax outputs. Higher means more certain.
pub fn ensemble_certainty(member_log_softmax: &[Tensor]) -> Result<Vec<f64>> {
    let first = member_log_softmax.first().ok_or(Error::EmptyReduction("ensemble members"))?;
    let mut sum = first.clone();
    for m in &member_log_softmax[1..] {
        sum = sum.zip_map(m, "ensemble certainty", |a, b| a + b)?;
    }
    let top = argmax_rows(&sum);
    let cols = first.shape()[1];
    let scores = top
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let probs: Vec<f64> = member_log_softmax.iter().map(|m| math::exp(m.data()[i * cols + c])).collect();
            -sample_variance(&probs)
        })
        .collect();
    Ok(scores)
}

/// Error rate among the most certain fraction of predictions, for a grid of
/// coverage fractions in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCurve {
    /// `(coverage, error)` pairs, coverage strictly decreasing.
    pub points: Vec<(f64, f64)>,
}

impl CoverageCurve {
    /// Error at the grid point closest to `coverage`.
    pub fn error_at(&self, coverage: f64) -> Option<f64> {
        self.points
            .iter()
            .min_by(|a, b| (a.0 - coverage).abs().total_cmp(&(b.0 - coverage).abs()))
            .map(|p| p.1)
    }
}

/// `k / steps` for `k = steps, steps - 1, ..., 1`.
pub fn default_grid(steps: usize) -> Vec<f64> {
    (1..=steps).rev().map(|k| k as f64 / steps as f64).collect()
}

/// Number of samples kept at coverage `c` of `n`: `ceil(c * n)`, where
/// products within `1e-9` of an integer count as that integer so that grid
/// fractions like `0.07` are not pushed up by rounding. At least one
/// sample is kept for any positive coverage.
pub fn coverage_count(c: f64, n: usize) -> usize {
    let x = c * n as f64;
    let r = libm::round(x);
    let k = if (x - r).abs() < 1e-9 { r } else { libm::ceil(x) };
    (k as usize).clamp(1, n)
}

/// Stable descending order of `scores`.
pub fn certainty_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Error-coverage curve: samples are ranked by descending score (ties keep
/// input order) and for every coverage `c` of `grid` the error rate of the
/// top `ceil(c * N)` samples is recorded.
pub fn error_coverage(scores: &[f64], correct: &[bool], grid: &[f64]) -> Result<CoverageCurve> {
    if scores.len() != correct.len() {
        return Err(Error::ShapeMismatch {
            op: "error_coverage",
            lhs: alloc::vec![scores.len()],
            rhs: alloc::vec![correct.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyReduction("error_coverage"));
    }
    if let Some(c) = grid.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::InvalidArgument(alloc::format!("coverage {} outside (0, 1]", c)));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("coverage grid must be strictly decreasing".into()));
    }
    let order = certainty_order(scores);
    let mut errors_prefix = Vec::with_capacity(order.len() + 1);
    errors_prefix.push(0usize);
    for &i in &order {
        errors_prefix.push(errors_prefix.last().unwrap() + usize::from(!correct[i]));
    }
    let n = scores.len();
    let points = grid
        .iter()
        .map(|&c| {
            let k = coverage_count(c, n);
            (c, errors_prefix[k] as f64 / k as f64)
        })
        .collect();
    Ok(CoverageCurve { points })
}
