//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the enrichment engine.
///
/// The variants are grouped by how the CLI maps them to exit codes:
/// everything except [`Error::Consistency`] is an input/validation problem
/// (exit 1); `Consistency` means the engine contradicted itself and is a bug
/// (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing prerequisite output {path}: run `{stage}` first")]
    MissingPrerequisite { path: PathBuf, stage: String },

    #[error("internal consistency violation: {0}")]
    Consistency(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Consistency(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_input_from_consistency() {
        assert_eq!(Error::input("x").exit_code(), 1);
        assert_eq!(Error::validation("x").exit_code(), 1);
        assert_eq!(Error::Consistency("x".into()).exit_code(), 2);
    }
}
