use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layout::broadcast_shape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Per-batch element offsets of `a` and `b` inside a broadcast batch shape.
struct BatchPlan {
    batch_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", "operands must have rank >= 2", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents differ ({k} vs {k2})"), a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch_shape = broadcast_shape(a_batch, b_batch, "matmul")?;
    let nb = numel(&batch_shape);
    let offsets = |own: &[usize], mat: usize| -> Vec<usize> {
        let st = strides(own);
        let pad = batch_shape.len() - own.len();
        let mut offs = Vec::with_capacity(nb);
        let mut idx = vec![0usize; batch_shape.len()];
        for _ in 0..nb {
            let mut off = 0;
            for (ax, &i) in idx.iter().enumerate().skip(pad) {
                if own[ax - pad] != 1 {
                    off += i * st[ax - pad];
                }
            }
            offs.push(off * mat);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < batch_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        offs
    };
    let a_offsets = offsets(a_batch, m * k);
    let b_offsets = offsets(b_batch, k * n);
    Ok(BatchPlan { batch_shape, a_offsets, b_offsets, m, k, n })
}

/// Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]` with
/// broadcastable leading extents.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.a_offsets.len() * m * n];
    let (da, db) = (a.data(), b.data());
    for (bi, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = da[ao + i * k + kk];
                let brow = &db[bo + kk * n..bo + (kk + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        }
    }
    let mut shape = p.batch_shape;
    shape.extend_from_slice(&[m, n]);
    Tensor::new(&shape, out)
}

/// Gradients of [`matmul`] with respect to both operands; broadcast batch
/// axes are summed back onto the operand that was stretched.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (da, db, dg) = (a.data(), b.data(), grad.data());
    {
        let ga = ga.data_mut();
        for (bi, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
            let g = &dg[bi * m * n..(bi + 1) * m * n];
            // dA = dC @ B^T
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for kk in 0..k {
                    let brow = &db[bo + kk * n..bo + (kk + 1) * n];
                    let mut acc = T::zero();
                    for (&x, &y) in grow.iter().zip(brow) {
                        acc += x * y;
                    }
                    ga[ao + i * k + kk] += acc;
                }
            }
        }
    }
    {
        let gb = gb.data_mut();
        for (bi, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
            let g = &dg[bi * m * n..(bi + 1) * m * n];
            // dB = A^T @ dC
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = da[ao + i * k + kk];
                    let dst = &mut gb[bo + kk * n..bo + (kk + 1) * n];
                    for (d, &x) in dst.iter_mut().zip(grow) {
                        *d += av * x;
                    }
                }
            }
        }
    }
    Ok((ga, gb))
}
