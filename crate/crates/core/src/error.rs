use thiserror::Error;

/// Errors raised by model construction, inference and file IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("stationary distribution did not converge after {iterations} squarings (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("every state has zero likelihood at position {position}")]
    ZeroLikelihood { position: usize },

    #[error("non-finite objective at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("enumerating {count} state sequences exceeds the cap of {cap}")]
    EnumerationTooLarge { count: f64, cap: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{what} checksum mismatch: expected {expected}, computed {actual}")]
    Checksum {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable short identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NoConvergence { .. } => "no_convergence",
            Error::ZeroLikelihood { .. } => "zero_likelihood",
            Error::NonFinite { .. } => "non_finite",
            Error::EnumerationTooLarge { .. } => "enumeration_too_large",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Toml(_) => "toml",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
