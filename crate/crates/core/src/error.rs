use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (e.g. non-finite logits).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimization diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("explainer failed: {0}")]
    Explainer(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("{path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
