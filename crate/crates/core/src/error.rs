//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("shape mismatch: {context} (got {got:?}, expected {expected:?})")]
    ShapeMismatch {
        context: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label map is entirely {class}; signed distance is undefined for the absent class")]
    SingleClassLabel { class: &'static str },

    #[error("mask has no surface voxels: {0}")]
    EmptySurface(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("checkpoint error on {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn nifti(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Nifti {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: impl Into<String>, got: &[usize], expected: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            got: got.to_vec(),
            expected: expected.to_vec(),
        }
    }
}
