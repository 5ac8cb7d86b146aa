//! Dense tensors, reverse-mode gradients, and finite-difference checking.

pub mod blob;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{hash_named, Scalar, Tensor};

pub(crate) use graph::dot;
