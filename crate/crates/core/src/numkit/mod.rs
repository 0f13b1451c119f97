//! Minimal dense-tensor math: a [`Tensor`] type, a reverse-mode [`Graph`],
//! SGD and AdamW, and a finite-difference gradient checker.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;
pub mod vectors;

pub use graph::{Gradients, Graph, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use optim::{OptimizerConfig, OptimizerState};
pub use tensor::Tensor;
