//! Max and average pooling.
//!
//! Max pooling records the flat input index of each window's winner; ties go
//! to the first element in row-major window order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PoolKind {
    Max,
    Avg,
}

fn out_extent(n: usize, window: usize, stride: usize, shape: &[usize]) -> Result<usize> {
    if window == 0 || stride == 0 || window > n {
        return Err(Error::shape("pool", format!("window {window} (stride {stride}) exceeds extent {n}"), shape, &[window, stride]));
    }
    Ok((n - window) / stride + 1)
}

/// Windowed pooling over the last two axes of `[.., H, W]`.
/// Returns the output and, for max pooling, the winning flat indices.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, kind: PoolKind, window: [usize; 2], stride: [usize; 2]) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() < 2 {
        return Err(Error::shape("pool", "rank must be >= 2", x.shape(), &[]));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let ho = out_extent(h, window[0], stride[0], x.shape())?;
    let wo = out_extent(w, window[1], stride[1], x.shape())?;
    let planes = numel(&x.shape()[..r - 2]);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::new();
    let inv = T::one() / T::from_usize(window[0] * window[1]);
    let xd = x.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, x0) = (oy * stride[0], ox * stride[1]);
                match kind {
                    PoolKind::Max => {
                        let mut best = base + y0 * w + x0;
                        for dy in 0..window[0] {
                            for dx in 0..window[1] {
                                let i = base + (y0 + dy) * w + x0 + dx;
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(xd[best]);
                        arg.push(best);
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for dy in 0..window[0] {
                            for dx in 0..window[1] {
                                s += xd[base + (y0 + dy) * w + x0 + dx];
                            }
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
    }
    let mut shape = x.shape()[..r - 2].to_vec();
    shape.extend_from_slice(&[ho, wo]);
    Ok((Tensor::new(&shape, out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(grad: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        d[i] += g;
    }
    gx
}

pub fn avg_pool2d_backward<T: Scalar>(grad: &Tensor<T>, input_shape: &[usize], window: [usize; 2], stride: [usize; 2]) -> Tensor<T> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (ho, wo) = (grad.shape()[r - 2], grad.shape()[r - 1]);
    let inv = T::one() / T::from_usize(window[0] * window[1]);
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (p, chunk) in grad.data().chunks(ho * wo).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = chunk[oy * wo + ox] * inv;
                for dy in 0..window[0] {
                    for dx in 0..window[1] {
                        d[p * h * w + (oy * stride[0] + dy) * w + ox * stride[1] + dx] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Max pooling along the last axis of `[.., L]`.
pub fn max_pool1d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut lifted = x.shape().to_vec();
    let l = lifted.pop().ok_or_else(|| Error::shape("pool", "rank 0", x.shape(), &[]))?;
    lifted.extend_from_slice(&[1, l]);
    let (y, arg) = pool2d(&x.reshape(&lifted)?, PoolKind::Max, [1, window], [1, stride])?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = y.shape()[y.rank() - 1];
    Ok((y.reshape(&shape)?, arg))
}

/// Average over every axis after the channel axis: `[N, C, ..] -> [N, C, 1, .., 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape("global_avg_pool", "expected [N, C, ...]", x.shape(), &[]));
    }
    let inner = numel(&x.shape()[2..]);
    let inv = T::one() / T::from_usize(inner);
    let data = x.data().chunks(inner).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    let mut shape = x.shape()[..2].to_vec();
    shape.resize(x.rank(), 1);
    Tensor::new(&shape, data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let inner = numel(&input_shape[2..]);
    let inv = T::one() / T::from_usize(inner);
    Tensor::from_fn(input_shape, |i| grad.data()[i / inner] * inv)
}

/// Maximum along `axis`, which is removed from the shape.
pub fn max_over_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if axis >= x.rank() {
        return Err(Error::shape("max_over_axis", format!("axis {axis} out of range"), x.shape(), &[]));
    }
    let outer = numel(&x.shape()[..axis]);
    let n = x.shape()[axis];
    let inner = numel(&x.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = o * n * inner + i;
            for j in 1..n {
                let k = (o * n + j) * inner + i;
                if d[k] > d[best] {
                    best = k;
                }
            }
            out.push(d[best]);
            arg.push(best);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok((Tensor::new(&shape, out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_pairs() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 4], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        let (y, arg) = max_pool1d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(arg, alloc::vec![1, 3]);
    }

    #[test]
    fn global_avg_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.25);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn global_max_of_sorted_row_is_last() {
        let x = Tensor::<f64>::from_fn(&[1, 7], |i| i as f64 * 2.0 - 3.0);
        let (y, _) = max_over_axis(&x, 1).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(max_pool1d(&x, 4, 1).unwrap_err().is_shape());
    }

    #[test]
    fn max_tie_goes_to_first() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let (_, arg) = pool2d(&x, PoolKind::Max, [2, 2], [2, 2]).unwrap();
        assert_eq!(arg, alloc::vec![0]);
    }

    #[test]
    fn avg_pool_window() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap();
        let (y, _) = pool2d(&x, PoolKind::Avg, [2, 2], [2, 2]).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }
}
