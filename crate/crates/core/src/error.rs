use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed feature file: {0}")]
    Format(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("model adapter failed: {0}")]
    Adapter(String),

    /// Latency metrics are undefined for an empty hypothesis.
    #[error("empty hypothesis, latency is undefined")]
    EmptyHypothesis,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
