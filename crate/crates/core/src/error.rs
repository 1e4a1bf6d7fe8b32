use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
