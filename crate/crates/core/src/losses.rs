//! Training objective: weighted per-task BCE plus a sequential-dependence
//! penalty on adjacent task pairs.
//!
//! For tasks ordered down the funnel, the probability of a later task can
//! never exceed the earlier one, and the gap between adjacent predictions is
//! supervised directly: the dependence target for pair `(i-1, i)` is
//! `o_{i-1} - o_i`, which is 1 exactly on samples that converted at step
//! `i-1` but not at step `i`, and 0 otherwise (the remaining combination is
//! forbidden by the funnel). The penalty is the mean squared error between
//! `f_{i-1} - f_i` and that target.

use thiserror::Error;

use crate::numerics::DiffTensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("need at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("expected {expected} {what}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Dependence target for one adjacent pair: `o_prev - o_curr` elementwise.
pub fn dependence_label(o_prev: &[f64], o_curr: &[f64]) -> Vec<f64> {
    assert_eq!(o_prev.len(), o_curr.len());
    o_prev.iter().zip(o_curr).map(|(p, c)| p - c).collect()
}

/// Mean BCE of one task's predictions against its labels. Returns the scalar
/// loss node and how many predictions hit the clamp bound.
pub fn main_task_loss(pred: &DiffTensor, labels: &[f64]) -> (DiffTensor, usize) {
    pred.bce_mean(labels)
}

/// Mean squared gap error for one adjacent pair:
/// `mean((f_prev - f_curr - (o_prev - o_curr))^2)`.
pub fn dependence_loss(f_prev: &DiffTensor, f_curr: &DiffTensor, o_prev: &[f64], o_curr: &[f64]) -> DiffTensor {
    let target = dependence_label(o_prev, o_curr);
    f_prev.sub(f_curr).sq_err_mean(&target)
}

/// The scalar total plus every component, kept as live tape nodes so callers
/// can differentiate any of them.
pub struct LossReport {
    pub total: DiffTensor,
    /// Per-task mean BCE, unweighted.
    pub main: Vec<DiffTensor>,
    /// Per adjacent pair mean squared gap error, unweighted; `dep[i]` is the
    /// pair `(i, i+1)`.
    pub dep: Vec<DiffTensor>,
    /// Number of predictions that hit the BCE clamp, across all tasks.
    pub clamped: usize,
}

impl LossReport {
    pub fn main_values(&self) -> Vec<f64> {
        self.main.iter().map(DiffTensor::item).collect()
    }

    pub fn dep_values(&self) -> Vec<f64> {
        self.dep.iter().map(DiffTensor::item).collect()
    }
}

/// Full objective: `sum_i w_i * BCE_i + sum_{i>=2} sigma_{i-1} * gap_i`.
/// The total is assembled from the same nodes reported, so the identity
/// `total = sum of weighted parts` holds to floating-point exactness.
pub fn total_loss(
    preds: &[DiffTensor],
    labels: &[Vec<f64>],
    weights: &[f64],
    sigmas: &[f64],
) -> Result<LossReport, LossError> {
    let n = preds.len();
    if n < 2 {
        return Err(LossError::TooFewTasks(n));
    }
    if labels.len() != n {
        return Err(LossError::LengthMismatch { what: "label vectors", expected: n, got: labels.len() });
    }
    if weights.len() != n {
        return Err(LossError::LengthMismatch { what: "task weights", expected: n, got: weights.len() });
    }
    if sigmas.len() != n - 1 {
        return Err(LossError::LengthMismatch { what: "sigmas", expected: n - 1, got: sigmas.len() });
    }

    let mut clamped = 0;
    let mut main = Vec::with_capacity(n);
    for (pred, task_labels) in preds.iter().zip(labels) {
        let (loss, c) = main_task_loss(pred, task_labels);
        clamped += c;
        main.push(loss);
    }
    let mut dep = Vec::with_capacity(n - 1);
    for i in 1..n {
        dep.push(dependence_loss(&preds[i - 1], &preds[i], &labels[i - 1], &labels[i]));
    }

    let mut total = main[0].scale(weights[0]);
    for (loss, w) in main.iter().zip(weights).skip(1) {
        total = total.add(&loss.scale(*w));
    }
    for (loss, s) in dep.iter().zip(sigmas) {
        total = total.add(&loss.scale(*s));
    }

    Ok(LossReport { total, main, dep, clamped })
}
