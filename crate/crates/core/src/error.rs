use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {primitive}")]
    NonFinite { primitive: &'static str },

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Strategy(String),

    #[error("could only synthesize {achieved} of {requested} distinct negatives for {qa_id}")]
    Exhausted { qa_id: String, requested: usize, achieved: usize },

    #[error("layout does not fit at resolution {resolution}: {detail}")]
    Layout { resolution: u32, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint config digest mismatch: file has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png encoding failed for {path}: {detail}")]
    Png { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
