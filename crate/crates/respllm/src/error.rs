//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Matrix shapes do not conform for the requested operation.
    #[error("dimension mismatch in {op}: left is {lhs}, right is {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A model or layer configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Bad input data (empty waveform, out-of-range label, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A metric could not be computed (e.g. AUROC with a single class).
    #[error("undefined metric: {0}")]
    Metric(String),

    /// A runtime contract was violated (e.g. parameters mutated during
    /// zero-shot inference).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint serialization / deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged; the payload names the last good checkpoint, if any.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {detail}")]
    Wav { path: String, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
