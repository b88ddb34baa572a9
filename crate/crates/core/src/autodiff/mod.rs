//! Dense-tensor compute core with reverse-mode differentiation.
//!
//! Covers exactly the operator set the conv → attention → MLP models need,
//! plus the Adam optimizer and a finite-difference gradient checker that
//! serves as the independent oracle for every backward pass.

mod adam;
mod graph;
mod gradcheck;
mod tensor;

pub use adam::{sgd_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, LossBuilder};
pub use graph::{Activation, AutodiffError, Gradients, Graph, NodeId};
pub use tensor::{Scalar, Tensor};
