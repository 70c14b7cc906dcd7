//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Graphs are rebuilt for every minibatch. Values are computed eagerly when a
//! node is recorded; [`Graph::backward`] sweeps adjoints from a scalar root and
//! [`Graph::grad_wrt_input`] materialises a derivative as new nodes so that it
//! can be trained through.

mod adam;
mod graph;
mod params;
mod symbolic;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Adjoints, Graph, Node, NodeId, Op};
pub use params::{Gradients, ParamStore, Parameter};
pub use tensor::{sigmoid, softplus, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("`{op}` produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node is not part of this graph")]
    NotInGraph,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{id}` has shape {expected:?}, gradient has {found:?}")]
    ParamShape {
        id: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Contract(String),
}
