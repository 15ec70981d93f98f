use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by the kind of failure so that callers (the CLI in
/// particular) can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file contents: bad magic, unreadable header, unsupported dtype.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree (e.g. dims vs. number of stored values).
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A precondition on an argument or value does not hold.
    #[error("validation error: {0}")]
    Validation(String),

    /// Input is well-formed but degenerate for the requested operation
    /// (constant volume for z-scoring, constant reference for PSNR, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Tensor shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical consistency check failed (e.g. a non-Hermitian spectrum
    /// inverted where a real image was expected).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// A checkpoint was trained on subjects that the evaluation split holds out.
    #[error("split leakage: {0}")]
    Leakage(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
