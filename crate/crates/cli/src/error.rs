use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;
use softdist::Error;

/// Failure of one subcommand. Each kind has its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config schema violation: {0}")]
    Schema(String),

    #[error("missing input {path}: {detail}")]
    Missing { path: PathBuf, detail: String },

    #[error("upstream artifact mismatch: {0}")]
    Mismatch(String),

    #[error("output {0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn missing(path: &Path, e: io::Error) -> Self {
        CliError::Missing {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable name and exit code.
    pub fn kind(&self) -> (&'static str, i32) {
        match self {
            CliError::Schema(_) => ("schema", 3),
            CliError::Missing { .. } => ("missing-file", 4),
            CliError::Mismatch(_) => ("shape-mismatch", 5),
            CliError::Exists(_) => ("output-exists", 6),
            CliError::Io { .. } => ("io", 10),
            CliError::Core(e) => match e {
                Error::InvalidInput(_) => ("schema", 3),
                Error::File { source, .. } if source.kind() == io::ErrorKind::NotFound => ("missing-file", 4),
                Error::ShapeMismatch { .. } => ("shape-mismatch", 5),
                Error::EmptyPool(_) => ("empty-pool", 7),
                Error::Checkpoint(_) | Error::Idx(_) | Error::Json(_) | Error::Csv(_) => ("corrupt-artifact", 8),
                Error::TrainingDiverged { .. } => ("training-diverged", 9),
                Error::Initialization(_) | Error::File { .. } | Error::Io(_) => ("io", 10),
            },
        }
    }

    /// The one-line JSON record printed on failure.
    pub fn json_line(&self) -> String {
        let (kind, code) = self.kind();
        json!({ "error": kind, "exit_code": code, "message": self.to_string() }).to_string()
    }
}
