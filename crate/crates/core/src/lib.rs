//! Robust meta-learning on a from-scratch, double-backward capable
//! reverse-mode autodiff engine.
//!
//! * [`autodiff`]: tape-based reverse mode whose gradients are themselves
//!   differentiable.
//! * [`nn`]: MLP classifier, cross-entropy, accuracy, checkpoints.
//! * [`tasks`]: multi-environment datasets and N-way K-shot episodes.
//! * [`meta`]: MAML, first-order MAML, Reptile and the IRMv1-penalized RML.
//! * [`harness`]: training with model selection, evaluation, reports.
//! * [`verify`]: finite-difference verification suite.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
