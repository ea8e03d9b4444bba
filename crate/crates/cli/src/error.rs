use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing {what} at `{}`; run `quest {command}` (cmd_{}) first", path.display(), command.replace('-', "_"))]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("refusing to overwrite `{}`; choose a fresh output directory or pass --force", .0.display())]
    Exists(PathBuf),

    #[error("`{}` is not a {expected} checkpoint", path.display())]
    WrongCheckpoint {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        source: quest_core::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<quest_core::Error> for CliError {
    fn from(source: quest_core::Error) -> Self {
        CliError::Core {
            context: "pipeline".into(),
            source,
        }
    }
}

impl CliError {
    /// Short stable tag for the structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Exists(_) => "output_exists",
            CliError::WrongCheckpoint { .. } => "wrong_checkpoint",
            CliError::Core {
                source: quest_core::Error::ConfigMismatch { .. },
                ..
            } => "config_mismatch",
            CliError::Core { .. } => "pipeline",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Exists(_) => 4,
            _ => 1,
        }
    }
}

/// Attaches what was being done to a core error.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for quest_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
