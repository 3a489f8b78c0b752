use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("svg parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("svg serialization error: {0}")]
    Serialize(String),

    #[error("unknown region id '{0}'")]
    UnknownId(String),

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("edit script failed at op {index}: {source}")]
    Script {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("optimization diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// Process exit code for command-line front ends: 2 for input and
    /// format problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            Error::Script { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
