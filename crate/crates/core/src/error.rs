use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("rank {rank} exceeds min(tokens, width) = {max}")]
    Rank { rank: usize, max: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parameter groups overlap on `{0}`")]
    Partition(String),

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("pixel ({y}, {x}) is not covered by any tile")]
    Coverage { y: usize, x: usize },

    #[error("unmatched files: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        /// `(parameter name, gradient L2 norm)` at the failing step.
        grad_norms: Vec<(String, f64)>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape { .. }
                | Error::Rank { .. }
                | Error::Validation(_)
                | Error::Partition(_)
                | Error::Ingestion(_)
                | Error::Coverage { .. }
                | Error::Unmatched(_)
        )
    }
}
