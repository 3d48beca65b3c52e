use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point lies on or outside the boundary of the constrained domain.
    #[error("point outside the open domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An update produced a non-finite coordinate.
    #[error("non-finite update for particle {particle}{}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    NonFinite { particle: usize, iteration: Option<usize> },

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach an iteration index to a `NonFinite` error; other variants pass through.
    pub fn at_iteration(self, t: usize) -> Self {
        match self {
            Error::NonFinite { particle, .. } => Error::NonFinite {
                particle,
                iteration: Some(t),
            },
            other => other,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidArgument(_) | Error::DimensionMismatch { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
