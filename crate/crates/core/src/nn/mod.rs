//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! layer set needed for network-in-network encoders, probe heads, and the
//! transformation-regression loss, plus SGD with momentum, weight decay, and
//! a step learning-rate schedule.
//!
//! Everything runs in double precision on a single thread per graph; fixed
//! iteration orders keep training trajectories bit-reproducible for a fixed
//! seed.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{lr_at_epoch, sgd_step, NamedBuffer, ParamSet, Parameter, SgdConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: batch norm needs at least 2 values per channel in train mode")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss tensor is not a scalar")]
    NotScalar,
    #[error("loss value is not part of this graph")]
    DisconnectedLoss,
    #[error("parameter {name} has no gradient")]
    MissingGradient { name: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

/// Whether batch statistics are computed and updated (training) or the
/// running estimates are used (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
