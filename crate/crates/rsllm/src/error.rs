use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rsllm_core::Error),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("candidate sampling for user `{user}`: need {needed} eligible items, only {available} of {catalog} are outside the interaction history")]
    TooFewCandidates { user: String, needed: usize, available: usize, catalog: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("unknown item index {index} (catalog has {catalog} items)")]
    UnknownItem { index: usize, catalog: usize },

    #[error("prompt of {len} positions exceeds the model context of {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
