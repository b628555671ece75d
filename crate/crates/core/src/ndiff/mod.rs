//! Dense tensors with a reverse-mode differentiation tape.

mod check;
mod gemm;
mod graph;
mod tensor;

pub use check::{grad_check, DEFAULT_EPS};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
