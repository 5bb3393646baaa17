//! Batch normalization over every axis except the channel axis.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved forward state of a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub normalized: Tensor<T>,
    /// Elements per channel.
    pub count: usize,
}

fn layout<T: Scalar>(x: &Tensor<T>, axis: usize, c: usize) -> Result<(usize, usize)> {
    if axis >= x.rank() || x.shape()[axis] != c {
        return Err(Error::shape("batch_norm", "channel axis does not match parameter length", x.shape(), &[c]));
    }
    Ok((numel(&x.shape()[..axis]), numel(&x.shape()[axis + 1..])))
}

/// Normalizes with batch statistics, then applies `gamma * x_hat + beta`.
pub fn batch_norm_train<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, BatchStats<T>)> {
    let c = gamma.numel();
    let (outer, inner) = layout(x, axis, c)?;
    let count = outer * inner;
    let n = T::from_usize(count);
    let eps = T::from_f64(BN_EPSILON);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            *m += xd[base..base + inner].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let m = mean[ch];
            var[ch] += xd[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let (nd, yd) = (normalized.data_mut(), y.data_mut());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
                for i in base..base + inner {
                    let h = (xd[i] - m) * is;
                    nd[i] = h;
                    yd[i] = g * h + b;
                }
            }
        }
    }
    Ok((y, BatchStats { mean, var, inv_std, normalized, count }))
}

/// Moves running statistics toward the batch statistics
/// (`running = (1 - momentum) * running + momentum * batch`, unbiased variance).
pub fn update_running<T: Scalar>(stats: &BatchStats<T>, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>) {
    let mom = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - mom;
    let correction = if stats.count > 1 { T::from_usize(stats.count) / T::from_usize(stats.count - 1) } else { T::one() };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + mom * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + mom * v * correction;
    }
}

/// Eval-mode normalization with stored running statistics.
/// Returns the output and the normalized input (needed for `gamma` gradients).
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let (outer, inner) = layout(x, axis, c)?;
    let eps = T::from_f64(BN_EPSILON);
    let mut y = Tensor::zeros(x.shape());
    let mut normalized = Tensor::zeros(x.shape());
    {
        let (yd, nd, xd) = (y.data_mut(), normalized.data_mut(), x.data());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let m = running_mean.data()[ch];
                let is = T::one() / (running_var.data()[ch] + eps).sqrt();
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for i in base..base + inner {
                    let h = (xd[i] - m) * is;
                    nd[i] = h;
                    yd[i] = g * h + b;
                }
            }
        }
    }
    Ok((y, normalized))
}

/// `(d_x, d_gamma, d_beta)` for the train-mode forward.
pub fn batch_norm_train_backward<T: Scalar>(
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let (outer, inner) = layout(grad, axis, c)?;
    let n = T::from_usize(stats.count);
    let (gd, hd) = (grad.data(), stats.normalized.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * hd[i];
            }
        }
    }
    let mut dx = Tensor::zeros(grad.shape());
    {
        let dxd = dx.data_mut();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let k = gamma.data()[ch] * stats.inv_std[ch] / n;
                for i in base..base + inner {
                    dxd[i] = k * (n * gd[i] - dbeta[ch] - hd[i] * dgamma[ch]);
                }
            }
        }
    }
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// `(d_x, d_gamma, d_beta)` for the eval-mode forward.
pub fn batch_norm_eval_backward<T: Scalar>(
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    running_var: &Tensor<T>,
    normalized: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let (outer, inner) = layout(grad, axis, c)?;
    let eps = T::from_f64(BN_EPSILON);
    let (gd, hd) = (grad.data(), normalized.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(grad.shape());
    {
        let dxd = dx.data_mut();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let k = gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt();
                for i in base..base + inner {
                    dbeta[ch] += gd[i];
                    dgamma[ch] += gd[i] * hd[i];
                    dxd[i] = k * gd[i];
                }
            }
        }
    }
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], g), Tensor::full(&[c], b))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[4, 2, 3], 7.5);
        let (g, b) = affine(2, 1.0, 0.0);
        let (y, _) = batch_norm_train(&x, &g, &b, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 4], |i| (i as f64).cos());
        let (g, b) = affine(2, 0.0, 5.0);
        let (y, _) = batch_norm_train(&x, &g, &b, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn symmetric_pair_up_to_epsilon() {
        // mean 0, biased variance 1 => +-1 / sqrt(1 + eps)
        let x = Tensor::<f64>::from_f64(&[2, 1], &[-1.0, 1.0]).unwrap();
        let (g, b) = affine(1, 1.0, 0.0);
        let (y, _) = batch_norm_train(&x, &g, &b, 1).unwrap();
        let s = 1.0 / (1.0f64 + BN_EPSILON).sqrt();
        assert_eq!(y.data(), &[-s, s]);
    }

    #[test]
    fn last_axis_channels() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 * 0.3 - 1.0);
        let (g, b) = affine(4, 1.0, 0.0);
        let (y, stats) = batch_norm_train(&x, &g, &b, 2).unwrap();
        assert_eq!(stats.count, 6);
        for ch in 0..4 {
            let m: f64 = (0..6).map(|r| y.data()[r * 4 + ch]).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn running_update_uses_momentum() {
        let x = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let (g, b) = affine(1, 1.0, 0.0);
        let (_, stats) = batch_norm_train(&x, &g, &b, 1).unwrap();
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::ones(&[1]);
        update_running(&stats, &mut rm, &mut rv);
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2 => 0.9 * 1 + 0.1 * 2
        assert!((rv.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::<f64>::from_f64(&[2, 1], &[2.0, 4.0]).unwrap();
        let (g, b) = affine(1, 2.0, 1.0);
        let rm = Tensor::full(&[1], 2.0);
        let rv = Tensor::full(&[1], 4.0 - BN_EPSILON);
        let (y, _) = batch_norm_eval(&x, &g, &b, &rm, &rv, 1).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 3.0).abs() < 1e-12);
    }
}
