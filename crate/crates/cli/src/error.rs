use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit code for invalid manifests.
pub const EXIT_VALIDATION: u8 = 2;
/// Process exit code for failures while running or reporting.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid manifest:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("missing artifacts:\n  {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n  "))]
    MissingArtifacts(Vec<PathBuf>),

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] sdlab::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn artifact(path: &Path, message: impl ToString) -> Self {
        CliError::Artifact {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}
