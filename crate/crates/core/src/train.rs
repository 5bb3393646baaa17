//! Epoch loop over an in-memory sample set.

use alloc::vec::Vec;

use crate::data::{collate, epoch_batches, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Hyper, ModelState};
use crate::ops::concat;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub hyper: Hyper,
    /// Seed of the per-epoch batch shuffle.
    pub shuffle_seed: u64,
}

/// One pass over `indices` in shuffled mini-batches; returns the mean batch
/// loss and advances `state.epoch`.
pub fn train_epoch<T: Scalar>(state: &mut ModelState<T>, samples: &[Sample<T>], indices: &[usize], opts: &TrainOptions) -> Result<f64> {
    let classes = state.model.config.classes;
    let batches = epoch_batches(indices, opts.batch_size, opts.shuffle_seed, state.epoch, true)?;
    let mut total = 0.0;
    for idx in &batches {
        let members: Vec<&Sample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = collate(&members, classes)?;
        total += state.train_step(&batch, &opts.hyper)?;
    }
    state.epoch += 1;
    Ok(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 })
}

/// Eval-mode probabilities and summed cross-entropy for a run of samples.
pub fn predict_chunk<T: Scalar>(state: &ModelState<T>, samples: &[Sample<T>], indices: &[usize]) -> Result<(f64, Tensor<T>)> {
    let members: Vec<&Sample<T>> = indices.iter().map(|&i| &samples[i]).collect();
    let batch = collate(&members, state.model.config.classes)?;
    let (loss, probs) = state.evaluate(&batch)?;
    Ok((loss * indices.len() as f64, probs))
}

/// Joins per-chunk results, in order, into a report.
pub fn report_from_chunks<T: Scalar>(epoch: u64, split: Split, chunks: Vec<(f64, Tensor<T>)>, labels: &[usize]) -> Result<MetricsReport> {
    if chunks.is_empty() {
        return Err(Error::data("no samples to evaluate"));
    }
    let loss: f64 = chunks.iter().map(|c| c.0).sum::<f64>() / labels.len() as f64;
    let probs: Vec<&Tensor<T>> = chunks.iter().map(|c| &c.1).collect();
    let probs = concat(&probs, 0)?;
    MetricsReport::compute(epoch, split, loss, &probs, labels)
}

/// Sequential evaluation of `indices` in chunks of `batch_size`.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    samples: &[Sample<T>],
    indices: &[usize],
    batch_size: usize,
    split: Split,
) -> Result<MetricsReport> {
    let batches = epoch_batches(indices, batch_size, 0, 0, false)?;
    let chunks = batches.iter().map(|b| predict_chunk(state, samples, b)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| samples[i].label).collect();
    report_from_chunks(state.epoch, split, chunks, &labels)
}
