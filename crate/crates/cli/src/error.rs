use std::path::PathBuf;

use film::FilmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}:{line}: {message}", path.display())]
    Data { path: PathBuf, line: usize, message: String },

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] FilmError),
}

impl CliError {
    /// 0 success, 1 usage, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Data { .. } | CliError::Input(_) => 2,
            CliError::Core(e) => match e {
                FilmError::Config(_) => 1,
                FilmError::Numerical(_) | FilmError::Diverged { .. } => 3,
                _ => 2,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
