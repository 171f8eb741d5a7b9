//! Dense 64-bit tensors, a taped reverse-mode graph, and the Adam optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{finite_diff_check, Graph, NodeId};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use tensor::{Gradients, ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("invalid dims {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("node {node} ({op}): dimension mismatch: {detail}")]
    NodeShape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} reads node {input}, which does not precede it")]
    NotTopological { node: usize, input: usize },
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("parameter `{0}` is not bound")]
    UnboundParam(String),
    #[error("backward root must be scalar, got dims {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("finite-difference step must lie in (0, 1e-3], got {0}")]
    InvalidStep(f64),
    #[error("adam step counter must be >= 1")]
    InvalidStepCount,
}
