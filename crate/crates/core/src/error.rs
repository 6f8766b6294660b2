use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdfaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A conditioning event has (near) zero probability, or a ratio is undefined.
    #[error("degenerate conditioning: {0}")]
    Degenerate(String),

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<AdfaError>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AdfaError>;

impl AdfaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AdfaError::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        AdfaError::Degenerate(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        AdfaError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 validation, 3 numerical/conditioning, 4 capacity.
    pub fn exit_code(&self) -> i32 {
        match self {
            AdfaError::Stage { source, .. } => source.exit_code(),
            AdfaError::Capacity(_) => 4,
            AdfaError::Degenerate(_) | AdfaError::IllConditioned(_) | AdfaError::Internal(_) => 3,
            AdfaError::InvalidArgument(_)
            | AdfaError::Precondition(_)
            | AdfaError::InsufficientLabels(_)
            | AdfaError::Parse { .. }
            | AdfaError::Io(_)
            | AdfaError::Json(_) => 2,
        }
    }
}
