use std::path::PathBuf;

use terlab::ErrorKind;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Field-level problems found before any work starts.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] terlab::Error),

    /// A core error raised while reading a named input file.
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: terlab::Error },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::Validation(vec![message.into()])
    }

    pub fn exit_code(&self) -> i32 {
        let kind = match self {
            CliError::Validation(_) | CliError::Config { .. } => ErrorKind::Validation,
            CliError::Core(e) | CliError::Input { source: e, .. } => e.kind(),
            CliError::Io { .. } => ErrorKind::Io,
        };
        match kind {
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::Io => 4,
        }
    }
}
