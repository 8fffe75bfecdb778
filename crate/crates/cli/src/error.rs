use thiserror::Error;

/// Errors surfaced to the command line. Usage errors exit with 1, stage
/// failures with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("stage `{stage}` failed: {source:#}")]
    Stage {
        stage: String,
        #[source]
        source: anyhow::Error,
    },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn stage(stage: &str, source: impl Into<anyhow::Error>) -> Self {
        Self::Stage {
            stage: stage.to_owned(),
            source: source.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Stage { .. } => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
