use std::path::Path;

/// Failure of a command, carrying its exit-code class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("divergence: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<ebsg_core::Error> for CliError {
    fn from(e: ebsg_core::Error) -> Self {
        match e {
            ebsg_core::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
