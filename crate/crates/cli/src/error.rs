use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mgfuse_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("artifact {path} belongs to another configuration (fingerprint {found}, expected {expected}); rerun with --force or rename the experiment")]
    StaleArtifact { path: PathBuf, found: String, expected: String },

    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },

    #[error("plot error: {0}")]
    Plot(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
            CliError::StaleArtifact { .. } => "stale_artifact",
            CliError::CellsFailed { .. } => "cells_failed",
            CliError::Plot(_) => "plot",
        }
    }

    /// 2 for bad input, 1 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({"kind": self.kind(), "message": self.to_string()});
        match self {
            CliError::Config { path, .. } => body["path"] = json!(path),
            CliError::Io { path, .. } | CliError::StaleArtifact { path, .. } => body["path"] = json!(path),
            _ => {}
        }
        json!({ "error": body })
    }
}
