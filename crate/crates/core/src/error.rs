use std::path::PathBuf;

use crate::study_io::SequenceId;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("required sequence {0} is missing")]
    MissingSequence(SequenceId),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("slice has no label but a labeled operation was requested")]
    MissingLabel,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A training step produced a non-finite loss. Carries the serialized loss report.
    #[error("non-finite loss at epoch {epoch}, step {step}: {report}")]
    NumericFailure {
        epoch: usize,
        step: usize,
        report: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti error on {path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for errors caused by bad input data rather than bad configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingSequence(_)
                | Error::ShapeMismatch(_)
                | Error::CorruptData(_)
                | Error::MissingLabel
                | Error::Io { .. }
                | Error::Nifti { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
