//! Dense 2-D tensors, a reverse-mode tape over a fixed primitive set, Adam,
//! and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{linear_lr, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradReport};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor2;
