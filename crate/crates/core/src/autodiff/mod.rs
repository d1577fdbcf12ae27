//! Dense-tensor computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once with the builder methods, evaluated against named
//! bindings with [`eval_graph`], and differentiated with [`backward`]. The
//! primitive catalog is closed; models are compositions of [`Op`] variants.

mod adam;
mod embed;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamError, AdamState};
pub use embed::sinusoidal_embed;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{backward, eval_graph, resume_graph, Bindings, Evaluation, Gradients, Graph, GraphNode, NodeId, Op};
pub use params::Params;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("node #{node} ({op}): expected {expected}, got input shapes {actual:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: String,
        actual: Vec<Vec<usize>>,
    },
    #[error("no binding for input `{name}`")]
    MissingInput { name: String },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("embedding width must be even, got {0}")]
    OddEmbeddingWidth(usize),
}
