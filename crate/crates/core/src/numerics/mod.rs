//! Dense arrays, a static differentiable graph and gradient checking.

mod array;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, EntryRef, GradCheckConfig, GradCheckReport};
pub use graph::{
    Backward, Bindings, GradFault, Gradients, Graph, NodeId, OpKind, Trace, NORM_GUARD,
};

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("shape error at node #{node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: OpKind,
        detail: String,
    },
    #[error("leaf `{leaf}` is not bound")]
    Unbound { leaf: String },
    #[error("leaf `{leaf}` bound with shape {found:?}, declared {expected:?}")]
    BindingShape {
        leaf: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("leaf `{leaf}` bound to non-finite data")]
    NonFiniteBinding { leaf: String },
    #[error("node #{node} ({op}) produced a non-finite value")]
    NonFiniteValue { node: usize, op: OpKind },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("trace does not cover the requested root")]
    StaleTrace,
}
