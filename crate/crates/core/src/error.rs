use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("input not sorted by time at index {index}")]
    Unsorted { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("correlation matrix has zero total counts")]
    ZeroTotal,

    #[error("tomographic design matrix is singular (condition number {condition:.3e})")]
    SingularDesign { condition: f64 },

    #[error("gaussian fit failed: {0}")]
    FitFailed(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidState(_) => "invalid_state",
            Error::Domain(_) => "domain",
            Error::Unsorted { .. } => "unsorted",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroTotal => "zero_total",
            Error::SingularDesign { .. } => "singular_design",
            Error::FitFailed(_) => "fit_failed",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
