use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the samplers, backends, metrics and pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("position {position} is outside the sampling grid (0..={steps})")]
    OffGrid { position: usize, steps: usize },

    #[error("singular coefficient: {0}")]
    Singular(String),

    #[error("numeric guard tripped: {0}")]
    NumericGuard(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("backend does not support differentiation: {0}")]
    NotDifferentiable(&'static str),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("trajectory cache: {0}")]
    Cache(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    ConfigLine { path: String, line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{chain} chain failed at position {position}: {source}")]
    Chain {
        chain: &'static str,
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_chain(self, chain: &'static str, position: usize) -> Self {
        Error::Chain {
            chain,
            position,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numeric-guard trip.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericGuard(_) => true,
            Error::Stage { source, .. } | Error::Chain { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
