//! Classification losses over predicted probabilities.
//!
//! Both losses take the network's probability output (after softmax or
//! sigmoid), clamp it away from 0 and 1, and return the mean loss plus
//! its gradient with respect to the probabilities.

use serde::{Deserialize, Serialize};

use super::tensor::{Elem, Tensor};
use super::NnError;

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before any log.
pub const CLAMP: f64 = 1e-7;

/// Which loss a training run uses; paired with the head activation
/// (softmax -> cross-entropy, sigmoid -> per-neuron binary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

impl LossKind {
    /// Mean loss and gradient for `[n, classes]` probabilities against
    /// integer class labels.
    pub fn compute<F: Elem>(
        &self,
        probs: &Tensor<F>,
        labels: &[usize],
    ) -> Result<(f64, Tensor<F>), NnError> {
        match self {
            LossKind::CrossEntropy => cross_entropy(probs, labels),
            LossKind::BinaryCrossEntropy => binary_cross_entropy(probs, labels),
        }
    }
}

fn check_labels<F: Elem>(probs: &Tensor<F>, labels: &[usize]) -> Result<(usize, usize), NnError> {
    if probs.shape().len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "loss expects [batch, classes] probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::ShapeMismatch(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok((n, c))
}

/// Mean negative log probability of the true class. The gradient of a
/// clamped probability is zero, consistent with finite differences of
/// the clamped loss.
pub fn cross_entropy<F: Elem>(
    probs: &Tensor<F>,
    labels: &[usize],
) -> Result<(f64, Tensor<F>), NnError> {
    let (n, c) = check_labels(probs, labels)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![F::ZERO; probs.numel()];
    for (ni, &label) in labels.iter().enumerate() {
        let p = probs.data()[ni * c + label].to_f64();
        let clamped = p.clamp(CLAMP, 1.0 - CLAMP);
        loss -= clamped.ln();
        if (CLAMP..=1.0 - CLAMP).contains(&p) {
            grad[ni * c + label] = F::from_f64(-scale / clamped);
        }
    }
    Ok((loss * scale, Tensor::from_vec(probs.shape(), grad)?))
}

/// Per-neuron binary cross-entropy against the one-hot encoding of the
/// labels, averaged over every neuron in the batch.
pub fn binary_cross_entropy<F: Elem>(
    probs: &Tensor<F>,
    labels: &[usize],
) -> Result<(f64, Tensor<F>), NnError> {
    let (n, c) = check_labels(probs, labels)?;
    let scale = 1.0 / (n * c) as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![F::ZERO; probs.numel()];
    for (ni, &label) in labels.iter().enumerate() {
        for ci in 0..c {
            let p = probs.data()[ni * c + ci].to_f64();
            let clamped = p.clamp(CLAMP, 1.0 - CLAMP);
            let target = if ci == label { 1.0 } else { 0.0 };
            loss -= target * clamped.ln() + (1.0 - target) * (1.0 - clamped).ln();
            if (CLAMP..=1.0 - CLAMP).contains(&p) {
                let g = (clamped - target) / (clamped * (1.0 - clamped));
                grad[ni * c + ci] = F::from_f64(g * scale);
            }
        }
    }
    Ok((loss * scale, Tensor::from_vec(probs.shape(), grad)?))
}

/// Fraction of rows whose argmax (first index on ties) equals the label.
pub fn accuracy<F: Elem>(probs: &Tensor<F>, labels: &[usize]) -> Result<f64, NnError> {
    let (n, c) = check_labels(probs, labels)?;
    let mut hits = 0usize;
    for (ni, &label) in labels.iter().enumerate() {
        let row = &probs.data()[ni * c..(ni + 1) * c];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate().skip(1) {
            if v.to_f64() > row[best].to_f64() {
                best = i;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
