use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    DimsMismatch {
        context: &'static str,
        left: Dims,
        right: Dims,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class universe mismatch: {left} vs {right} classes")]
    ClassMismatch { left: usize, right: usize },

    #[error("pyramid of {levels} levels would shrink {dims:?} below 2 voxels on some axis")]
    PyramidTooDeep { dims: Dims, levels: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported datatype code {code} in {path}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in loss term `{term}` at level {level}, iteration {iteration}")]
    NonFinite {
        term: &'static str,
        level: usize,
        iteration: usize,
    },

    #[error("in loss term `{term}`: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }

    /// True for the error classes caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::MalformedHeader { .. }
            | Error::UnsupportedDatatype { .. }
            | Error::TruncatedPayload { .. } => true,
            Error::Term { source, .. } => source.is_io(),
            _ => false,
        }
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Term { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn check_dims(context: &'static str, left: Dims, right: Dims) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimsMismatch {
            context,
            left,
            right,
        })
    }
}
