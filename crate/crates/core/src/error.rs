use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variants map onto the stable process exit codes used by the
/// command-line front end (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// The experiment design violates its preconditions.
    #[error("invalid design: {0}")]
    Design(String),

    /// Shapes or labels of the inputs do not fit together.
    #[error("structural error: {0}")]
    Structure(String),

    /// An estimator cannot be evaluated on the realized data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Malformed input text.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Exhaustive enumeration would exceed the configured cap.
    #[error("enumeration needs {required} assignments, above the cap of {cap}")]
    Capacity { required: u128, cap: u128 },

    /// Rank deficiency, singular blocks and similar numeric failures.
    #[error("numeric failure: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 validation, 2 capacity, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity { .. } => 2,
            Error::LinearAlgebra(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
