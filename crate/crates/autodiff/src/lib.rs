//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`] replays
//! them in reverse. [`AdamState`] consumes the resulting gradients and
//! [`grad_check`] compares them against central finite differences.

mod error;
mod gemm;
mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;
mod vjp;

pub use error::{AutodiffError, Result};
pub use gradcheck::grad_check;
pub use optim::AdamState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Logistic function, numerically stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    ops::sigmoid(x)
}
