use thiserror::Error;

/// Errors raised while constructing inputs or running kernels and audits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite entry in {what} at index {index:?}")]
    NonFinite { what: &'static str, index: Vec<usize> },

    #[error("gate out of open interval: {what}={value} at index {index:?}")]
    GateOutOfOpenInterval {
        what: &'static str,
        value: f64,
        index: Vec<usize>,
    },

    #[error("gate out of (0, 1]: {what}={value} at index {index:?}")]
    GateOutOfRange {
        what: &'static str,
        value: f64,
        index: Vec<usize>,
    },

    #[error("key at index {index:?} has norm {norm}, but keys are flagged unit-norm")]
    NotUnitNorm { index: Vec<usize>, norm: f64 },

    #[error("zero key at index {index:?}")]
    ZeroKey { index: Vec<usize> },

    #[error("missing gate: {0}")]
    MissingGate(&'static str),

    #[error("d trajectory was not retained during the forward sweep")]
    MissingTrajectory,

    #[error("clamp mask was not retained during the forward sweep")]
    MissingClampMask,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular triangular system at row {row}")]
    SingularSystem { row: usize },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
