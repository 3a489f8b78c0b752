use thiserror::Error;

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged in stage {stage} at epoch {epoch}")]
    Diverged { stage: usize, epoch: usize },

    #[error("non-finite state at sampling step {step}")]
    NonFinite { step: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },

    #[error(transparent)]
    Core(#[from] vgloop::Error),
}

impl FlowError {
    /// 3 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlowError::Diverged { .. } | FlowError::NonFinite { .. } => 3,
            FlowError::Core(e) => e.exit_code(),
            _ => 2,
        }
    }
}
