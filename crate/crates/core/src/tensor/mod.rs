//! Dense tensors, their compute kernels and the reverse-mode tape.

mod array;
mod graph;
pub mod io;
pub mod kernels;

pub use array::Tensor;
pub use graph::{Gradients, Graph, Var};
