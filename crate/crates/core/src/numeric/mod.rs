//! Dense tensors, reverse-mode differentiation, gradient validation and
//! optimisation.

mod graph;
mod gradcheck;
mod optim;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
