//! Dense 64-bit tensors and a small tape-based reverse-mode differentiator.
//!
//! The surface is intentionally narrow: the operations needed to build and
//! train small MLP / convolutional autoencoders and to take gradients of
//! scalar objectives with respect to arbitrary inputs (latent vectors
//! included). There is no broadcasting beyond the bias add in [`Tape::linear`]
//! and [`Tape::conv2d`]; use [`Tape::reshape`], [`Tape::concat`] and
//! [`Tape::narrow`] to move data around.

mod check;
mod error;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use ops::{Activation, Reduction};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
