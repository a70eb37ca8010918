//! Dense `f64` tensors, the numerical kernels used by the classifier, and a
//! tape-based reverse-mode differentiator with a finite-difference checker.

mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use ops::{ConvSpec, NormStats, PoolMode, PoolSpec};
pub use tensor::Tensor;
