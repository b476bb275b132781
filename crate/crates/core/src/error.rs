use std::io;

use thiserror::Error;

use crate::dataio::FormatError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Tensor(_) | Error::Numeric(_) => 4,
        }
    }
}

/// Attaches the path to an i/o error.
pub fn at_path(path: &std::path::Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
