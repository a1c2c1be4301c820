use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] hymesh_core::Error),
    /// A check suite ran to completion with failures. `output` holds the
    /// per-case lines.
    #[error("{message}")]
    Check { output: String, message: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Format { .. } => "format",
            CliError::Core(hymesh_core::Error::Config(_)) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Check { .. } => "check_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Config(_) | CliError::Core(hymesh_core::Error::Config(_)) => 4,
            CliError::Format { .. } => 5,
            CliError::Core(_) => 6,
            CliError::Check { .. } => 1,
        }
    }

    /// One-line JSON summary for stderr.
    pub fn to_json(&self) -> String {
        json!({ "status": "error", "kind": self.kind(), "message": self.to_string() }).to_string()
    }
}
