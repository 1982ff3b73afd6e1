use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("missing score component: {0}")]
    MissingComponent(&'static str),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
