//! Scalar losses with their gradients.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Root mean squared error and its gradient w.r.t. `pred`.
///
/// The gradient is taken as zero where the loss itself is zero.
pub fn rmse<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} non-empty matching elements", target.len()),
            got: pred.len().to_string(),
        });
    }
    let n = T::of(pred.len() as f64);
    let mse = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n;
    let loss = mse.sqrt();
    let grad = if loss > T::zero() {
        let scale = T::one() / (n * loss);
        pred.iter().zip(target).map(|(&p, &t)| (p - t) * scale).collect()
    } else {
        vec![T::zero(); pred.len()]
    };
    Ok((loss, grad))
}

/// `ln(p)` clamped below at -100, the usual BCE guard.
#[inline]
fn clamped_ln<T: Scalar>(p: T) -> T {
    p.ln().max(T::of(-100.0))
}

/// Mean binary cross entropy of probabilities against a constant label.
pub fn bce<T: Scalar>(probs: &[T], label: T) -> Result<T> {
    if probs.is_empty() {
        return Err(invalid("BCE over an empty batch"));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p > T::zero() && p < T::one())) {
        return Err(invalid(format!("probability {p} outside (0, 1)")));
    }
    let n = T::of(probs.len() as f64);
    Ok(probs
        .iter()
        .map(|&p| -(label * clamped_ln(p) + (T::one() - label) * clamped_ln(T::one() - p)))
        .sum::<T>()
        / n)
}

/// Gradient of mean BCE w.r.t. the logits that produced `probs`:
/// `(p - y) / n`.
pub fn bce_logit_grad<T: Scalar>(probs: &[T], label: T) -> Vec<T> {
    let n = T::of(probs.len() as f64);
    probs.iter().map(|&p| (p - label) / n).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax cross entropy for one example and its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} categories",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    Ok((loss, grad))
}
