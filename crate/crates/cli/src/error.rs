use deca_core::DecaError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DecaError),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated blob: {0}")]
    Truncated(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// Stable category printed on failure.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Version { .. } => "checkpoint_version",
            CliError::Truncated(_) => "checkpoint_truncated",
            CliError::Shape(_) => "checkpoint_shape",
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "io",
            CliError::Usage(_) => "usage",
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(DecaError::Json(e))
    }
}
