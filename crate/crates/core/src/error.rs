use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by this crate. Variants carry enough context to
/// point at the offending record, file, or stage without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record '{id}': {message}")]
    Schema { id: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingDiverged { epoch: usize, message: String },

    #[error("degenerate saliency for '{id}': every token gradient has zero norm")]
    DegenerateSaliency { id: String },

    #[error("annotation mismatch for '{id}': {message}")]
    AnnotationMismatch { id: String, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing provenance: {0}")]
    Provenance(String),

    #[error("internal consistency violation: {0}")]
    Inconsistency(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            id: id.into(),
            message: message.into(),
        }
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
