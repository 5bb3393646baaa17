//! Axis bookkeeping: permute, concat, slice and broadcasting arithmetic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of the axes"), x.shape(), perm));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.numel() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Inverse of a permutation.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no operands", &[], &[]))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range"), first.shape(), &[]));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for x in xs {
        let same = x.rank() == rank && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape("concat", format!("operands disagree off axis {axis}"), first.shape(), x.shape()));
        }
        out_shape[axis] += x.shape()[axis];
    }
    let outer = numel(&first.shape()[..axis]);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for x in xs {
            let chunk = numel(&x.shape()[axis..]);
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&out_shape, out)
}

/// Half-open slice `start..end` along one axis.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(Error::shape("slice", format!("range {start}..{end} invalid on axis {axis}"), x.shape(), &[start, end]));
    }
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let extent = x.shape()[axis];
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = end - start;
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(&out_shape, out)
}

/// Gradient of [`slice`]: scatters `grad` back into zeros of `full_shape`.
pub fn slice_backward<T: Scalar>(grad: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(full_shape);
    let outer = numel(&full_shape[..axis]);
    let inner = numel(&full_shape[axis + 1..]);
    let extent = full_shape[axis];
    let len = grad.shape()[axis] * inner;
    let data = out.data_mut();
    for o in 0..outer {
        let dst = o * extent * inner + start * inner;
        data[dst..dst + len].copy_from_slice(&grad.data()[o * len..(o + 1) * len]);
    }
    out
}

/// Right-aligned broadcast of two shapes (size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(op, format!("cannot broadcast axis {i} ({da} vs {db})"), a, b));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on stretched axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len()).map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { st[i - pad] }).collect()
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let rank = out_shape.len();
    let n = numel(&out_shape);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    // Innermost axis handled as a tight loop.
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n / last {
        for j in 0..last {
            out.push(f(da[oa + j * la], db[ob + j * lb]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, "mul", |x, y| x * y)
}

/// Sums `grad` (shaped like a broadcast result) down to `target`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(target, out_shape);
    let mut out = Tensor::zeros(target);
    let dst = out.data_mut();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        dst[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
