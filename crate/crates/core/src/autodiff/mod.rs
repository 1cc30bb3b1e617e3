//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every op appends a node to a [`Graph`]; [`Graph::backward`] walks the tape in
//! reverse. Values are row-major with the shape carried separately, and vectors
//! are `[1, n]` rows.

pub mod gradcheck;
mod graph;
mod tensor;

pub(crate) use graph::softmax_slice;
pub use graph::{BinaryOp, GradientFault, Graph, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}
