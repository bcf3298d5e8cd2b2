//! Dense tensors with reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Graph`] records each operation eagerly (values are computed when the node
//! is created) and [`Graph::backward`] walks the nodes in exact reverse creation
//! order, so gradients are bit-reproducible for identical graphs.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_coords};
pub use graph::{softmax_in_place as softmax_row, Gradients, Graph, NodeId, Op};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
