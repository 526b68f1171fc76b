use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("malformed model graph: {0}")]
    Graph(String),
    #[error("size guard: {what} has {size} parameters, limit is {limit}")]
    SizeGuard { what: &'static str, size: usize, limit: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pruning: {0}")]
    Prune(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(what.into())
    }
}
