use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in `{map}`: expected {expected}, got {got}")]
    Shape {
        map: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("sequence too short: T={len} must exceed K={horizon}")]
    TooShort { len: usize, horizon: usize },

    #[error("unknown parameter group `{0}`")]
    UnknownParam(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
