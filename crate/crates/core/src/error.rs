use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("alignment error: source has {source_lines} lines vs target {target_lines} lines ({source_lines} vs {target_lines})")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("empty line {line} in {path}")]
    EmptyLine { path: PathBuf, line: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("numeric error in {stage}: non-finite value")]
    Numeric { stage: String },

    #[error("incompatible preprocessing: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: file is truncated or corrupt")]
    Checksum,

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::train::Checkpoint>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(stage: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
        }
    }
}
