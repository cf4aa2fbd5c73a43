//! Error taxonomy shared across the workbench.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or layer configuration.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: String, detail: String },

    /// A numeric failure: NaN/Inf produced, degenerate norm, undefined metric.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// API misuse: backward on a consumed graph, non-scalar loss, etc.
    #[error("usage error in {op}: {detail}")]
    Usage { op: String, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion problem (missing file, malformed CSV, bad label).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn usage(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Usage {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
