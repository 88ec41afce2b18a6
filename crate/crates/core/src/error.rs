use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("loss diverged at step {step}: {value}")]
    Divergence { step: usize, value: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("ingestion error in {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
