use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Checkpoint(String),

    #[error("train/test overlap: {0}")]
    Overlap(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: tradelab::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Overlap(_) => "overlap",
            CliError::Core { .. } => "runtime",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            kind: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Vec::is_empty")]
            problems: Vec<String>,
        }
        let problems = match self {
            CliError::Config(p) => p.clone(),
            _ => Vec::new(),
        };
        let report = Report {
            kind: self.kind(),
            message: self.to_string(),
            problems,
        };
        serde_json::to_string(&serde_json::json!({ "error": report })).unwrap_or_else(|_| self.to_string())
    }
}

/// Attaches context to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, tradelab::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
