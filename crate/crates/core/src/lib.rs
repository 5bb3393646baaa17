//! Dense tensors, reverse-mode differentiation and the audio-visual
//! cross-attention classifier built on them.
//!
//! The crate is `no_std` with `alloc`; file formats, the command line and
//! threading live in the `avtca` companion crate.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use graph::{Graph, Mode};
pub use model::{build_variant, Architecture, Batch, Hyper, Model, ModelConfig, ModelState, Streams, VariantId};
pub use param::{BufferId, ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;
