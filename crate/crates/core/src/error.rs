use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("class {class} has {available} samples but the profile needs {needed}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("row {row} of {what} has zero norm")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} at position {position} is out of range for {classes} classes")]
    LabelOutOfRange {
        label: usize,
        position: usize,
        classes: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Format(#[from] crate::tensorio::FormatError),

    #[error(transparent)]
    Provider(#[from] crate::neighbors::ProviderError),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable kind, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Format(e) => e.kind(),
            Error::Provider(e) => e.kind(),
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
