// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    /// Malformed binary or text container (bad magic, truncation, version).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input whose content breaks a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Synthetic corpus description cannot be realized.
    #[error("spec error: {0}")]
    Spec(String),

    #[error("training diverged in epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("probe did not converge after {iters} iterations (gradient norm {grad_norm:.3e})")]
    Convergence { iters: usize, grad_norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
