use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: first column norm {0:.3e} is below 1e-8")]
    DegenerateRotation(f64),

    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotOrthonormal(f64),

    #[error("joints behind the camera: {0:?}")]
    BehindCamera(Vec<usize>),

    #[error("procrustes alignment is degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown skeleton '{name}', expected one of {valid:?}")]
    UnknownSkeleton {
        name: String,
        valid: Vec<&'static str>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format version '{found}', expected '{expected}'")]
    Version { found: String, expected: String },

    #[error("checkpoint is missing parameters: {0:?}")]
    MissingParams(Vec<String>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("autodiff usage error: {0}")]
    Usage(String),

    #[error("simulation blew up at frame {frame}")]
    SimulationBlowup { frame: usize },

    #[error("training diverged at epoch {epoch}; last good checkpoint at {checkpoint:?}")]
    Diverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
