//! Minimal differentiable array engine.

mod array;
mod gradcheck;
mod graph;
mod kernels;

pub use array::{numel, Array, Element};
pub use gradcheck::{finite_difference_gradient, gradient_mismatch};
pub use graph::{evaluate_with_gradients, Bindings, Evaluation, Gradients, Graph, NodeId, Op};


use crate::error::Result;

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Array<T>, axis: usize) -> Result<Array<T>> {
    graph::softmax_forward(x, axis)
}
