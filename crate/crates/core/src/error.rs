use thiserror::Error;

/// Errors raised by scene construction, rendering, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate covariance (condition number {condition:.3e})")]
    DegenerateCovariance { condition: f64 },

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient on primitive {primitive} ({field})")]
    NonFiniteGradient { primitive: usize, field: &'static str },

    #[error("data error: {0}")]
    Data(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
