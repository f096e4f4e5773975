use thiserror::Error;

/// Errors raised across the engine. Each variant maps onto one stable
/// category string used by the command-line front end.
#[derive(Debug, Error)]
pub enum DecaError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DecaError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            DecaError::Dimension(_) => "dimension",
            DecaError::Contract(_) => "contract",
            DecaError::Config(_) => "config",
            DecaError::Numeric(_) => "numeric",
            DecaError::Degenerate(_) => "degenerate",
            DecaError::Geometry(_) => "geometry",
            DecaError::Data(_) => "data",
            DecaError::Io(_) => "io",
            DecaError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, DecaError>;

pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> DecaError {
    DecaError::Dimension(format!("{what}: {a:?} vs {b:?}"))
}
