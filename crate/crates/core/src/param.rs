//! Named trainable parameters and non-trainable buffers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    /// Dot-separated path, unique within a store.
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub moment1: Tensor<T>,
    pub moment2: Tensor<T>,
    /// Whether decoupled weight decay applies (weights yes; biases and norm affines no).
    pub decay: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered table of every parameter and buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        self.check_unique(&name)?;
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, grad: zeros.clone(), moment1: zeros.clone(), moment2: zeros, value, decay });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.check_unique(&name)?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    #[inline]
    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    #[inline]
    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_elements_under(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds gradients produced by a backward sweep.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Tensor<T>)]) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Overwrites buffers, e.g. with updated running statistics.
    pub fn apply_buffer_updates(&mut self, updates: alloc::vec::Vec<(BufferId, Tensor<T>)>) {
        for (id, value) in updates {
            self.buffers[id.0].value = value;
        }
    }

    /// Copy of the whole table in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    moment1: p.moment1.cast(),
                    moment2: p.moment2.cast(),
                    decay: p.decay,
                })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: b.value.cast() }).collect(),
        }
    }
}
