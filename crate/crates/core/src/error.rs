use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("no body region")]
    NoBody,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint/spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("non-finite loss term `{0}`")]
    NonFinite(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
