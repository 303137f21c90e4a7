use thiserror::Error;

pub type Result<T, E = DgpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {message} (last jitter {jitter:e})")]
    Numerical { message: String, jitter: f64 },

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("training error in {block}: {message}")]
    Training { block: String, message: String },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DgpError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DgpError::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, jitter: f64) -> Self {
        DgpError::Numerical {
            message: msg.into(),
            jitter,
        }
    }
}

impl From<serde_json::Error> for DgpError {
    fn from(e: serde_json::Error) -> Self {
        DgpError::Serialization(e.to_string())
    }
}
