//! Accuracy metrics, parameter-norm diagnostics, and mean/std aggregation
//! over repeated runs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use num_traits::Float;

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyClass { class: usize },
    Empty,
    Mismatch(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyClass { class } => write!(f, "class {class} has no samples"),
            EvalError::Empty => write!(f, "empty input"),
            EvalError::Mismatch(s) => write!(f, "{s}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

/// Argmax with ties broken toward the lower class index.
pub fn predict_row(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax over a `[n, C]` logits tensor.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape[1];
    logits.values.chunks(c).map(predict_row).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
}

/// Accuracy and per-class accuracies; every class in `[0, classes)` must
/// be present in the labels.
pub fn metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Mismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        count[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    if let Some(class) = count.iter().position(|&c| c == 0) {
        return Err(EvalError::EmptyClass { class });
    }
    let per_class: Vec<f64> =
        correct.iter().zip(count.iter()).map(|(&c, &n)| c as f64 / n as f64).collect();
    let accuracy = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    let balanced = per_class.iter().sum::<f64>() / classes as f64;
    Ok(MetricsReport {
        accuracy,
        balanced_accuracy: balanced,
        per_class_accuracy: per_class,
        per_class_count: count,
    })
}

/// Mean over classes of the in-class accuracy.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64, EvalError> {
    Ok(metrics(predictions, labels, classes)?.balanced_accuracy)
}

/// Norm diagnostics of a parameter change.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReport {
    pub delta_l1: f64,
    pub delta_l2: f64,
    /// `||base||_2 - ||base + delta||_2`; negative when the norm grew.
    pub norm_diff: f64,
    /// Fraction of delta entries with `|d| < 1e-6`.
    pub sparsity_frac: f64,
}

pub const SPARSITY_THRESHOLD: f64 = 1e-6;

pub fn norm_report(base: &ParamSet, delta: &ParamSet) -> Result<NormReport, EvalError> {
    if !base.same_layout(delta) {
        return Err(EvalError::Mismatch(String::from(
            "base and delta layouts differ in norm_report",
        )));
    }
    let delta_l1 = delta.l1_norm();
    let delta_l2 = delta.l2_norm();
    let base_l2 = base.l2_norm();
    let sum_l2 = base.entrywise_sum(delta).expect("layout checked").l2_norm();
    let total: usize = delta.iter().map(|e| e.tensor.numel()).sum();
    let small = delta
        .iter()
        .flat_map(|e| e.tensor.values.iter())
        .filter(|v| v.abs() < SPARSITY_THRESHOLD)
        .count();
    Ok(NormReport {
        delta_l1,
        delta_l2,
        norm_diff: base_l2 - sum_l2,
        sparsity_frac: small as f64 / total as f64,
    })
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n = 1).
pub fn mean_std(rows: &[f64]) -> Result<(f64, f64), EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = rows.len() as f64;
    let mean = rows.iter().sum::<f64>() / n;
    let std = if rows.len() == 1 {
        0.0
    } else {
        (rows.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}
