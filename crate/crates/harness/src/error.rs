use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] cvqkd_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cannot parse config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: toml::de::Error,
    },

    #[error("{stage} needs {artifact} at {path}; run `cvqkd {hint}` first")]
    MissingArtifact {
        stage: &'static str,
        artifact: &'static str,
        path: PathBuf,
        hint: &'static str,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
