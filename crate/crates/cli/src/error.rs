use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{count} hierarchy violation(s)")]
    Validation { count: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },

    #[error(transparent)]
    Core(#[from] vgloop::Error),

    #[error(transparent)]
    Flow(#[from] vgloop_flow::FlowError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Io { .. } | CliError::Config(_) | CliError::Validation { .. } => 2,
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Core(e) => e.exit_code(),
            CliError::Flow(e) => e.exit_code(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CliError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
