//! Pure tensor kernels, forward and backward.
//!
//! These functions do not record anything; the [`Tape`](crate::autograd::Tape)
//! wraps them to build reverse-mode graphs.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod pool;

pub use activation::{activation, dropout, dropout_mask, softmax, Activation};
pub use conv::{conv1d, conv2d, Conv2dParams};
pub use layout::{add, concat, mul, permute, slice, sub};
pub use matmul::matmul;
pub use norm::{batch_norm_eval, batch_norm_train, BN_EPSILON, BN_MOMENTUM};
pub use pool::{global_avg_pool, max_over_axis, max_pool1d, pool2d, PoolKind};

use alloc::format;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor applied before the logarithm in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Affine map on the last axis: `x @ w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || b.shape() != [w.shape()[1]] {
        return Err(Error::shape("fully_connected", "weight must be [d_in, d_out] and bias [d_out]", w.shape(), b.shape()));
    }
    if x.shape().last() != Some(&w.shape()[0]) {
        return Err(Error::shape("fully_connected", "last extent must equal d_in", x.shape(), w.shape()));
    }
    let lead: usize = x.shape()[..x.rank() - 1].iter().product();
    let x2 = x.reshape(&[lead, w.shape()[0]])?;
    let y = add(&matmul(&x2, w)?, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(&shape)
}

/// Validates a `[N, C]` one-hot label matrix.
pub fn check_one_hot<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    if labels.rank() != 2 {
        return Err(Error::data(format!("labels must be [N, C], got {:?}", labels.shape())));
    }
    let c = labels.shape()[1];
    for (i, row) in labels.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::data(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean cross-entropy `-(1/N) sum_i sum_j y_ij ln(max(p_ij, 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    check_one_hot(labels)?;
    if probs.shape() != labels.shape() {
        return Err(Error::shape("cross_entropy", "probabilities and labels differ", probs.shape(), labels.shape()));
    }
    let n = T::from_usize(probs.shape()[0]);
    let floor = T::from_f64(PROB_FLOOR);
    let mut total = T::zero();
    for (&p, &y) in probs.data().iter().zip(labels.data()) {
        if y != T::zero() {
            // NaN must survive the clamp so divergence stays visible
            let p = if p.is_nan() { p } else { p.max(floor).min(T::one()) };
            total += y * p.ln();
        }
    }
    Ok(-total / n)
}

pub fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, grad: T) -> Tensor<T> {
    let n = T::from_usize(probs.shape()[0]);
    let floor = T::from_f64(PROB_FLOOR);
    Tensor::from_fn(probs.shape(), |i| {
        let (p, y) = (probs.data()[i], labels.data()[i]);
        if y == T::zero() || p <= floor || p > T::one() {
            T::zero()
        } else {
            -grad * y / (n * p)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_identity_and_bias() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(fully_connected(&x, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap(), x);
        let y = fully_connected(
            &Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap(),
            &Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap(),
            &Tensor::from_f64(&[1], &[0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.5]);
        let b = Tensor::from_f64(&[2], &[0.25, -1.0]).unwrap();
        let y = fully_connected(&Tensor::zeros(&[4, 3]), &Tensor::from_fn(&[3, 2], |i| i as f64), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn fc_shape_mismatch() {
        let err = fully_connected(&Tensor::<f64>::zeros(&[2, 4]), &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.is_shape());
    }

    #[test]
    fn cross_entropy_values() {
        let y = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&y, &y).unwrap(), 0.0);
        let p = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let l = cross_entropy(&p, &y).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_batch_mean() {
        let p1 = [0.7, 0.2, 0.1];
        let p2 = [0.1, 0.3, 0.6];
        let y1 = [0.0, 1.0, 0.0];
        let y2 = [0.0, 0.0, 1.0];
        let single = |p: &[f64], y: &[f64]| {
            cross_entropy(&Tensor::<f64>::from_f64(&[1, 3], p).unwrap(), &Tensor::from_f64(&[1, 3], y).unwrap()).unwrap()
        };
        let mut pb = p1.to_vec();
        pb.extend_from_slice(&p2);
        let mut yb = y1.to_vec();
        yb.extend_from_slice(&y2);
        let both: f64 = cross_entropy(&Tensor::from_f64(&[2, 3], &pb).unwrap(), &Tensor::from_f64(&[2, 3], &yb).unwrap()).unwrap();
        assert!((both - 0.5 * (single(&p1, &y1) + single(&p2, &y2))).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let y = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let l = cross_entropy(&p, &y).unwrap();
        assert!((l - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn non_one_hot_is_data_error() {
        let p = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let y = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert!(matches!(cross_entropy(&p, &y), Err(Error::Data(_))));
        let y = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        assert!(matches!(cross_entropy(&p, &y), Err(Error::Data(_))));
    }
}
