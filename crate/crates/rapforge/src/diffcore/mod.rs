//! Dense tensor arithmetic with reverse-mode automatic differentiation.

mod fd;
mod graph;
pub mod kernels;
mod tensor;

pub use fd::{finite_difference_grad, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
