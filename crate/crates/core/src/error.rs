use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for {len} samples")]
    Bounds { index: usize, len: usize },

    #[error("feature matrix has rank {rank}, smaller than target dimension {d}; choose d <= {rank}")]
    RankTooSmall { rank: usize, d: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization diverged: {message}")]
    Diverged { message: String, trace: Box<crate::solver::TrainingTrace> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FilmError>;
