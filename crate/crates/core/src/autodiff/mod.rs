//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! All arithmetic is `f64`. A [`Tape`] is built per forward pass and consumed
//! by [`Tape::backward`]; it is not `Sync` and lives on one thread.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Elementwise, Grads, Tape, Var};
pub use tensor::Tensor;

/// Default guard added under the square root of [`Tape::vector_norm`].
pub const NORM_EPS: f64 = 1e-12;
