//! Reverse-mode differentiation over a flat tape.
//!
//! Each differentiable call evaluates its kernel eagerly, stores the result
//! and records just enough to run the matching backward kernel. Nodes are
//! appended in evaluation order, so a reverse sweep visits every node after
//! all of its consumers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::activation::{activation, activation_backward, softmax_backward};
use crate::ops::conv::{conv2d_backward, Conv2dParams};
use crate::ops::layout::{inverse_permutation, reduce_to_shape, slice_backward};
use crate::ops::matmul::matmul_backward;
use crate::ops::norm::{batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward, BatchStats};
use crate::ops::pool::{avg_pool2d_backward, global_avg_pool_backward, max_pool2d_backward};
use crate::ops::{self, Activation, PoolKind};
use crate::param::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    Batch(BatchStats<T>),
    Running { var: Tensor<T>, normalized: Tensor<T> },
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        saved: Saved<T>,
    },
    Act(Var, Activation),
    Softmax(Var, usize),
    /// Max pooling and max-over-axis: each output came from one input index.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: [usize; 2],
        stride: [usize; 2],
    },
    GlobalAvg(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        probs: Var,
        labels: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward sweep, indexed by [`Var`]. Only leaves and
/// parameters keep their gradient; intermediates are released on the way.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant or input with respect to which gradients may be read.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn param_leaf(&mut self, value: Tensor<T>, id: ParamId) -> Var {
        self.push(value, Op::Param(id))
    }

    pub(crate) fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub(crate) fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { saved: Saved::Batch(s), .. } => Some(s),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).scale(c);
        self.push(y, Op::Scale(a, c))
    }

    /// Product with a constant that receives no gradient (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let y = ops::mul(self.value(a), &c)?;
        Ok(self.push(y, Op::MulConst(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &p)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, p }))
    }

    /// `[B, C, L]` convolution, recorded as a height-1 `conv2d`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", "expected x [B,C,L] and w [O,I,K]", &xs, &ws));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let p = Conv2dParams { stride: [1, stride], padding: [0, padding], dilation: [1, dilation], depthwise: false };
        let y = self.conv2d(x4, w4, b, p).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("conv1d", detail, &xs, &ws),
            other => other,
        })?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1], s[3]])
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let (y, stats) = batch_norm_train(self.value(x), self.value(gamma), self.value(beta), axis)?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, axis, saved: Saved::Batch(stats) }))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>, axis: usize) -> Result<Var> {
        let (y, normalized) = batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, axis)?;
        let saved = Saved::Running { var: var.clone(), normalized };
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, axis, saved }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = activation(self.value(x), kind);
        self.push(y, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax(x, axis)))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let (y, index) = ops::pool2d(self.value(x), kind, window, stride)?;
        let op = match kind {
            PoolKind::Max => Op::Gather { x, index },
            PoolKind::Avg => Op::AvgPool { x, window, stride },
        };
        Ok(self.push(y, op))
    }

    pub fn max_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, index) = ops::max_pool1d(self.value(x), window, stride)?;
        Ok(self.push(y, Op::Gather { x, index }))
    }

    /// `[N, C, ..] -> [N, C, 1, .., 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvg(x)))
    }

    /// Maximum along `axis`, removing it.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (y, index) = ops::max_over_axis(self.value(x), axis)?;
        Ok(self.push(y, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), perm)?;
        Ok(self.push(y, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank must be >= 2", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(y, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let y = ops::slice(self.value(x), axis, start, end)?;
        Ok(self.push(y, Op::Slice { x, axis, start }))
    }

    /// `x @ w + b` on the last axis, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("fully_connected", "last extent must equal d_in", &xs, &ws));
        }
        let lead: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self.reshape(x, &[lead, ws[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape("fully_connected", "bias must be [d_out]", self.shape(b), &ws));
            }
            y = self.add(y, b)?;
        }
        let mut out = xs;
        *out.last_mut().unwrap() = ws[1];
        self.reshape(y, &out)
    }

    /// Mean cross-entropy of `probs` against one-hot `labels`; a scalar node.
    pub fn cross_entropy(&mut self, probs: Var, labels: &Tensor<T>) -> Result<Var> {
        let l = ops::cross_entropy(self.value(probs), labels)?;
        Ok(self.push(Tensor::scalar(l), Op::CrossEntropy { probs, labels: labels.clone() }))
    }

    /// Propagates `d root / d node` back through the tape with seed ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], reduce_to_shape(g, val(*a).shape()));
                accumulate(&mut grads[b.0], reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], reduce_to_shape(g, val(*a).shape()));
                accumulate(&mut grads[b.0], reduce_to_shape(&g.scale(-T::one()), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = ops::mul(g, val(*b))?;
                let gb = ops::mul(g, val(*a))?;
                accumulate(&mut grads[a.0], reduce_to_shape(&ga, val(*a).shape()));
                accumulate(&mut grads[b.0], reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g.scale(*c)),
            Op::MulConst(a, c) => {
                let ga = ops::mul(g, c)?;
                accumulate(&mut grads[a.0], reduce_to_shape(&ga, val(*a).shape()));
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Conv2d { x, w, b, p } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, p)?;
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[w.0], gw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, axis, saved } => {
                let (gx, gg, gb) = match saved {
                    Saved::Batch(stats) => batch_norm_train_backward(g, val(*gamma), stats, *axis)?,
                    Saved::Running { var, normalized } => batch_norm_eval_backward(g, val(*gamma), var, normalized, *axis)?,
                };
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gamma.0], gg);
                accumulate(&mut grads[beta.0], gb);
            }
            Op::Act(x, kind) => {
                accumulate(&mut grads[x.0], activation_backward(val(*x), &node.value, g, *kind));
            }
            Op::Softmax(x, axis) => accumulate(&mut grads[x.0], softmax_backward(&node.value, g, *axis)),
            Op::Gather { x, index } => {
                accumulate(&mut grads[x.0], max_pool2d_backward(g, index, val(*x).shape()));
            }
            Op::AvgPool { x, window, stride } => {
                accumulate(&mut grads[x.0], avg_pool2d_backward(g, val(*x).shape(), *window, *stride));
            }
            Op::GlobalAvg(x) => accumulate(&mut grads[x.0], global_avg_pool_backward(g, val(*x).shape())),
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.reshape(val(*x).shape())?),
            Op::Permute(x, perm) => accumulate(&mut grads[x.0], ops::permute(g, &inverse_permutation(perm))?),
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let n = val(*x).shape()[*axis];
                    accumulate(&mut grads[x.0], ops::slice(g, *axis, start, start + n)?);
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                accumulate(&mut grads[x.0], slice_backward(g, val(*x).shape(), *axis, *start));
            }
            Op::CrossEntropy { probs, labels } => {
                let gp = ops::cross_entropy_backward(val(*probs), labels, g.item());
                accumulate(&mut grads[probs.0], gp);
            }
        }
        Ok(())
    }
}
