//! Classification metrics over `[N, C]` probability rows.
//!
//! Ties at the argmax and at the top-k boundary go to the lowest class index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The `k` of the logged precision@k column, clipped to the class count.
pub const TOP_K: usize = 5;

fn rows<T: Scalar>(preds: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let s = preds.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::data(format!("predictions {s:?} do not match {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::data(format!("label {l} out of range for {} classes", s[1])));
    }
    Ok(s[1])
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Whether `label` is among the `k` highest entries of `row`, where an entry
/// ranks above another if it is larger or equal with a lower index.
pub fn in_top_k<T: Scalar>(row: &[T], label: usize, k: usize) -> bool {
    let x = row[label];
    let above = row.iter().enumerate().filter(|&(j, &v)| v > x || (v == x && j < label)).count();
    above < k
}

/// Fraction of rows whose argmax is the label; 0 for an empty set.
pub fn accuracy<T: Scalar>(preds: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = rows(preds, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.data().chunks(c).zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of rows whose label is among the `k` most probable classes.
pub fn precision_at_k<T: Scalar>(preds: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let c = rows(preds, labels)?;
    if k == 0 || k > c {
        return Err(Error::config(format!("precision@k needs 1 <= k <= C = {c}, got k = {k}")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.data().chunks(c).zip(labels).filter(|(r, &l)| in_top_k(r, l, k)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion<T: Scalar>(preds: &Tensor<T>, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let c = rows(preds, labels)?;
    let mut m = vec![vec![0; c]; c];
    for (r, &l) in preds.data().chunks(c).zip(labels) {
        m[l][argmax(r)] += 1;
    }
    Ok(m)
}

/// Per-class `(precision, recall)` from a confusion matrix; 0/0 counts as 0.
pub fn per_class(m: &[Vec<usize>]) -> Vec<(f64, f64)> {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..m.len())
        .map(|c| {
            let tp = m[c][c];
            let predicted: usize = m.iter().map(|row| row[c]).sum();
            let actual: usize = m[c].iter().sum();
            (ratio(tp, predicted), ratio(tp, actual))
        })
        .collect()
}

/// Unweighted mean over classes of `2PR / (P + R)`, with 0/0 as 0.
pub fn f1_macro<T: Scalar>(preds: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let m = confusion(preds, labels)?;
    Ok(f1_from_confusion(&m))
}

pub fn f1_from_confusion(m: &[Vec<usize>]) -> f64 {
    let f1: f64 = per_class(m).iter().map(|&(p, r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }).sum();
    f1 / m.len() as f64
}

/// One row of the metrics table plus per-class detail.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epoch: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    /// Precision@k with `k = min(5, C)`.
    pub precision_at_5: f64,
    /// `(precision, recall)` per class.
    pub per_class: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn compute<T: Scalar>(epoch: u64, split: Split, loss: f64, preds: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let c = rows(preds, labels)?;
        let m = confusion(preds, labels)?;
        Ok(Self {
            epoch,
            split,
            loss,
            accuracy: accuracy(preds, labels)?,
            f1_macro: f1_from_confusion(&m),
            precision_at_5: precision_at_k(preds, labels, TOP_K.min(c))?,
            per_class: per_class(&m),
        })
    }
}
