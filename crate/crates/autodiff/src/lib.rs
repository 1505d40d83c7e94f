//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Spatial tensors use a channels-last layout `[batch, s0, s1, (s2), channels]`
//! with row-major storage. Every operation records a node on a [`Tape`];
//! [`Tape::backward`] walks the tape in reverse creation order and
//! accumulates vector-Jacobian products into every node that depends on a
//! trainable leaf.

mod adam;
mod error;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, Parameter};
pub use error::AdError;
pub use ops::{sigmoid, softplus, softplus_inverse, BatchStats};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AdError>;
