use dgp_core::DgpError;
use serde::{Deserialize, Serialize};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// Bad flags or an impossible experiment.
    Config,
    /// Unreadable dataset, manifest or model file.
    Ingestion,
    /// Factorization failure or non-finite training state.
    Numerical,
    /// A gradient check exceeded its tolerance.
    Verification,
    /// Could not write output.
    Io,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::Config => "config",
            FailureKind::Ingestion => "ingestion",
            FailureKind::Numerical => "numerical",
            FailureKind::Verification => "verification",
            FailureKind::Io => "io",
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Ingestion => 3,
            FailureKind::Numerical => 4,
            FailureKind::Verification => 5,
            FailureKind::Io => 6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Config, message)
    }

    pub fn ingestion(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Ingestion, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Io, message)
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }
}

impl From<DgpError> for CliError {
    fn from(e: DgpError) -> Self {
        let kind = match &e {
            DgpError::Config(_) => FailureKind::Config,
            DgpError::Ingestion { .. } | DgpError::Serialization(_) => FailureKind::Ingestion,
            DgpError::Numerical { .. } | DgpError::Training { .. } => FailureKind::Numerical,
            DgpError::Oracle(_) | DgpError::Verification(_) => FailureKind::Verification,
            DgpError::Io(_) => FailureKind::Io,
        };
        CliError::new(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
