use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {} (produce it with `{producer}`)", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("{} is stale: {reason} (re-run `{producer}`)", path.display())]
    StaleArtifact {
        path: PathBuf,
        producer: &'static str,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] cue_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::StaleArtifact { .. } => "stale_artifact",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => e.kind(),
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::MissingArtifact { path, producer } | CliError::StaleArtifact { path, producer, .. } => {
                v["path"] = json!(path);
                v["producer"] = json!(producer);
            }
            CliError::Io { path, .. } => v["path"] = json!(path),
            CliError::Core(cue_core::Error::MissingFile(path)) => v["path"] = json!(path),
            _ => {}
        }
        v
    }
}
