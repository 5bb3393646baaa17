//! Parameterized building blocks: convolution, batch norm, linear.
//!
//! Weights use a fan-in scaled uniform draw `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! taken in `f64` and cast, so both precisions start from the same values.
//! Biases and norm shifts start at zero, norm scales at one.

use alloc::format;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::Conv2dParams;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let mut s = rng.stream();
    Tensor::from_fn(shape, |_| T::from_f64(s.uniform_in(-bound, bound)))
}

/// Convolution over `[B, C, L]` (`rank` 1) or `[B, C, H, W]` (`rank` 2).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
    pub rank: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new_2d<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        params: Conv2dParams,
        bias: bool,
    ) -> Result<Self> {
        let (shape, fan_in) = if params.depthwise {
            if c_in != c_out {
                return Err(Error::config(format!("{name}: depthwise convolution needs C_out == C_in, got {c_out} vs {c_in}")));
            }
            ([c_out, 1, kernel, kernel], kernel * kernel)
        } else {
            ([c_out, c_in, kernel, kernel], c_in * kernel * kernel)
        };
        let weight = store.add_param(format!("{name}.weight"), fan_in_uniform(&shape, fan_in, rng), true)?;
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)).transpose()?;
        Ok(Self { weight, bias, params, rank: 2 })
    }

    /// 1-D convolution with "same" padding for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new_1d<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel];
        let weight = store.add_param(format!("{name}.weight"), fan_in_uniform(&shape, c_in * kernel, rng), true)?;
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)).transpose()?;
        let params = Conv2dParams { stride: [1, stride], padding: [0, (kernel - 1) / 2], dilation: [1, 1], depthwise: false };
        Ok(Self { weight, bias, params, rank: 1 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        if self.rank == 1 {
            let p = self.params;
            g.conv1d(x, w, b, p.stride[1], p.padding[1], p.dilation[1])
        } else {
            if g.shape(x).len() != 4 {
                return Err(Error::shape("conv2d", "expected [B, C, H, W]", g.shape(x), g.shape(w)));
            }
            g.conv2d(x, w, b, self.params)
        }
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.param(self.weight).value.shape()[0]
    }
}

/// Batch norm over a fixed channel axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub axis: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, axis: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels]), false)?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]), false)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            axis,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.axis)
    }
}

/// Affine map on the last axis with `weight: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_param(format!("{name}.weight"), fan_in_uniform(&[d_in, d_out], d_in, rng), true)?;
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[d_out]), false)).transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}
