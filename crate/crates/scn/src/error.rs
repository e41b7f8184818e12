use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum ScnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("schema hash mismatch: expected {expected}, found {found}")]
    SchemaHashMismatch { expected: String, found: String },

    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScnError>;
