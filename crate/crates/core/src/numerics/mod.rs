//! Dense tensors and reverse-mode automatic differentiation.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_softmax_rows, matmul, softmax_rows, Tensor};
