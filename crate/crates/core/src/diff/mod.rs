//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Only the operations the models need are provided. Convolutions are
//! cross-correlations (no kernel flip) with odd kernels and symmetric
//! padding of `(k - 1) / 2`. Division never adds an implicit epsilon.

mod array;
mod gradcheck;
mod graph;
mod opsuite;
mod params;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, Padding};
pub use opsuite::{check_primitive_ops, primitive_op_names};
pub use params::{AdamConfig, Checkpoint, CheckpointEntry, Parameter, ParameterStore, CHECKPOINT_FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("gaussian_log_pdf: standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParameter(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    InvalidArgument(String),
}
