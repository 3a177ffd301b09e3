//! Classification and regression metrics.
//!
//! Macro averages run over the labels present in either the actual or the
//! predicted vector. A class that is never predicted has precision 0, and a
//! class with precision and recall both 0 has F1 0.

use std::collections::BTreeSet;

fn classes(pred: &[usize], actual: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = pred.iter().chain(actual).copied().collect();
    set.into_iter().collect()
}

pub fn accuracy(pred: &[usize], actual: &[usize]) -> f64 {
    assert_eq!(pred.len(), actual.len());
    if actual.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(actual).filter(|(p, a)| p == a).count();
    hits as f64 / actual.len() as f64
}

/// Per-class (precision, recall).
fn per_class(pred: &[usize], actual: &[usize]) -> Vec<(f64, f64)> {
    assert_eq!(pred.len(), actual.len());
    classes(pred, actual)
        .into_iter()
        .map(|c| {
            let mut tp = 0usize;
            let mut predicted = 0usize;
            let mut present = 0usize;
            for (&p, &a) in pred.iter().zip(actual) {
                if p == c {
                    predicted += 1;
                    if a == c {
                        tp += 1;
                    }
                }
                if a == c {
                    present += 1;
                }
            }
            let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let recall = if present == 0 { 0.0 } else { tp as f64 / present as f64 };
            (precision, recall)
        })
        .collect()
}

pub fn macro_precision(pred: &[usize], actual: &[usize]) -> f64 {
    let pc = per_class(pred, actual);
    if pc.is_empty() {
        return 0.0;
    }
    pc.iter().map(|(p, _)| p).sum::<f64>() / pc.len() as f64
}

pub fn macro_f1(pred: &[usize], actual: &[usize]) -> f64 {
    let pc = per_class(pred, actual);
    if pc.is_empty() {
        return 0.0;
    }
    let f1 = |(p, r): &(f64, f64)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    pc.iter().map(f1).sum::<f64>() / pc.len() as f64
}

/// `1 - Σ|pred - actual| / Σ|mean(actual) - actual|`. When the actual values
/// are constant the score is 1 for a perfect prediction and 0 otherwise.
pub fn one_minus_rae(pred: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(pred.len(), actual.len());
    if actual.is_empty() {
        return 0.0;
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let num: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    let den: f64 = actual.iter().map(|a| (mean - a).abs()).sum();
    if den == 0.0 {
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - num / den
}

/// Coefficient of determination, with the same constant-target convention as
/// [`one_minus_rae`].
pub fn r2(pred: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(pred.len(), actual.len());
    if actual.is_empty() {
        return 0.0;
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}
