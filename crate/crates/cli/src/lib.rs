//! Command implementations behind the `dms` binary.

pub mod commands;
pub mod config;
pub mod report;

use dms::search::SearchError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, arguments, or artifact files.
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
}

impl CliError {
    /// 2 for a missed resource target or a diverged loss, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Search(SearchError::TargetMissed { .. } | SearchError::Divergence { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
