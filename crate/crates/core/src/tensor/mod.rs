//! Dense tensors and the differentiation tape.

mod dense;
mod graph;
pub(crate) mod kernels;

pub use dense::{Tensor, MAX_RANK};
pub(crate) use graph::bilinear;
pub use graph::{sigmoid, BatchNormMode, BatchStats, Fault, Graph, Var};
