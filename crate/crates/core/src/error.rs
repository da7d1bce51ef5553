use std::path::PathBuf;

use thiserror::Error;

use crate::runtime::RuntimeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("malformed weights file: {0}")]
    MalformedWeights(String),
    #[error("weights mismatch: {0}")]
    WeightsMismatch(String),
    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node `{0}` cannot be lowered inside a depth-first group")]
    UnsupportedInGroup(String),
    #[error("provider `{0}` is already registered")]
    DuplicateProvider(String),
    #[error("no provider implements node `{0}`")]
    NoProvider(String),
    #[error("graph has no loss node")]
    NonDifferentiableGraph,
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.to_string(),
            detail: detail.into(),
        }
    }
}
