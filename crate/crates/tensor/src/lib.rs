//! Minimal dense tensor engine: row-major `f64` tensors, forward kernels with
//! reverse-mode backward rules recorded on a per-pass tape, a central
//! finite-difference gradient checker, and the `BTSR` snapshot format.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod snapshot;
pub mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use tape::{concat0, concat_cols, Gradients, Tape, Var};
pub use tensor::Tensor;
