use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported spherical-harmonics degree {0} (supported: 0, 1)")]
    UnsupportedDegree(usize),

    #[error("degenerate initialization: {0}")]
    DegenerateInitialization(String),

    #[error("degenerate deformation at gaussian {index}: blended linear block has determinant {det:e}")]
    DegenerateDeformation { index: usize, det: f64 },

    #[error("insufficient points: need more than {k} points for k-NN, got {n}")]
    InsufficientPoints { n: usize, k: usize },

    #[error("stale neighbor graph: {0}")]
    StaleGraph(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed {}: {msg}", .path.display())]
    Malformed { path: PathBuf, msg: String },

    #[error("validation failed for {}: {msg}", .path.display())]
    Validation { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
