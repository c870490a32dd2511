use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on a graph with no recorded computation")]
    EmptyGraph,

    #[error("missing gradient for trainable parameter `{name}` (run backward first)")]
    MissingGradient { name: String },

    #[error("parameter `{name}` is already registered")]
    DuplicateParam { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },

    #[error("{op}: row {row} has zero norm; cosine is undefined")]
    ZeroNormRow { op: &'static str, row: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
