//! Crate-wide error type and the process exit codes it maps to.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum OpdError {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric quantity became non-finite; the context names the site.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A stage was asked to run before its input artifacts exist.
    #[error("missing prerequisite: {artifact} (run the `{stage}` stage first)")]
    MissingPrerequisite { artifact: PathBuf, stage: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but is not in the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl OpdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OpdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 numeric,
    /// 4 missing prerequisite. Everything else (IO, format) counts as a
    /// config-class failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            OpdError::Numeric(_) => 3,
            OpdError::MissingPrerequisite { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, OpdError>;
