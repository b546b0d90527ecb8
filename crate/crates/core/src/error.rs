use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("lesion placement failed: {0}")]
    Placement(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("volume has no foreground tokens")]
    EmptyVolume,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("confidence interval unreliable: {degenerate} of {replicates} replicates degenerate")]
    UnreliableCi { degenerate: usize, replicates: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
