use std::path::PathBuf;

use thiserror::Error;

use crate::stage::Stage;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Schema or value violation; `pointer` is a JSON pointer into the
    /// config document.
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("stage `{stage}` requires `{missing}`; run `domainrank {missing}` first")]
    MissingDependency { stage: Stage, missing: Stage },

    #[error("stage `{stage}` needs `{dependency}` to be rerun: it was built from older `{upstream}` artifacts")]
    StaleDependency {
        stage: Stage,
        dependency: Stage,
        upstream: Stage,
    },

    #[error("workdir {0} is locked by another run (remove the lock file if no run is active)")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] domainrank::Error),
}

impl CliError {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for filesystem failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Locked(_) => 2,
            CliError::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
