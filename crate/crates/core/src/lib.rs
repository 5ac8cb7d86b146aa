//! Hierarchical prompts for rehearsal-free class-incremental learning.
//!
//! A frozen transformer backbone is steered by three kinds of learnable
//! prompts: per-class Gaussian class prompts that can replay past classes,
//! per-task task prompts trained on real and replayed data, and general
//! prompts trained with a supervised contrastive objective. At test time a
//! task-aware query-key lookup picks which task's prompts to use.

pub mod backbone;
pub mod data;
pub mod diffcore;
mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod prompts;
pub mod rng;
pub mod trainer;

pub use diffcore::{Graph, Scalar, Tensor, Var};
pub use error::{Error, Result};
