//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine,
//! with the operations needed to express and train redundancy-reduction
//! attention models, plus a finite-difference gradient checker.

mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{
    Activation, BatchNormState, Conv2dSpec, Gradients, Graph, Mode, Var, LOG_FLOOR,
};
pub use tensor::Tensor;
