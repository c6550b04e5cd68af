use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] faultlab_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: {detail}")]
    Corruption { what: String, detail: String },

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("config: {0}")]
    Config(String),
}

impl CliError {
    /// Stable short code for the single-line error report.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(faultlab_core::Error::Precondition(_)) => "precondition",
            CliError::Core(faultlab_core::Error::Io { .. }) | CliError::Io { .. } => "io",
            CliError::Core(faultlab_core::Error::Format { .. })
            | CliError::Core(faultlab_core::Error::LengthMismatch { .. }) => "format",
            CliError::Core(_) => "domain",
            CliError::Corruption { .. } => "corruption",
            CliError::DuplicateKey(_) => "duplicate",
            CliError::Parse { .. } => "parse",
            CliError::Infeasible(_) => "infeasible",
            CliError::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
