//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Gradients can be materialised as ordinary graph nodes, so a loss evaluated
//! after one or more gradient steps can itself be differentiated exactly
//! (unrolled second-order differentiation).

mod graph;
mod oracle;
mod tensor;

pub use graph::{CompGraph, NodeId};
pub use oracle::{finite_diff_oracle, max_relative_error};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward requested before any forward pass recorded the output node")]
    NoForward,
    #[error("backward needs a scalar output, got a {rows}x{cols} node")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("node {node} does not belong to this graph")]
    UnknownNode { node: usize },
    #[error("node {node} is a detached gradient; rebuild the inner update with grad_graph to differentiate through it")]
    DetachedGradient { node: usize },
}

#[cfg(test)]
mod tests;
