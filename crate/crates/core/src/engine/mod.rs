//! Dense `f64` tensors and a recording graph for reverse-mode gradients.

pub mod gradcheck;
mod kernel;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
