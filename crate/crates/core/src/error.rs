use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hyper-parameter: {0}")]
    InvalidHyperParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("covariance matrix is indefinite: eigen-value {value:e} below tolerance {tolerance:e}")]
    Indefinite { value: f64, tolerance: f64 },

    #[error("retained mode {0} has zero eigen-value")]
    DegenerateMode(usize),

    #[error("singular covariance: pivot {pivot:e} below {threshold:e}")]
    SingularCovariance { pivot: f64, threshold: f64 },

    #[error("multi-index set too large: {0}")]
    Capacity(String),

    #[error("regression system is rank deficient ({samples} samples for {terms} terms)")]
    UnderSampled { samples: usize, terms: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("density support violation at x = {x}: p = {p:e}, q = {q:e}")]
    SupportViolation { x: f64, p: f64, q: f64 },

    #[error("samples are degenerate (zero spread)")]
    DegenerateSample,

    #[error("inverse-crime guard: {0}")]
    InverseCrime(String),

    #[error("stale surrogate: artifact fingerprint {artifact} does not match config {expected}")]
    StaleSurrogate { artifact: String, expected: String },

    #[error("initial state has non-finite log-posterior")]
    Initialization,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::Dimension { expected, found })
        }
    }
}
