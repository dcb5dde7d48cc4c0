use std::path::PathBuf;

use thiserror::Error;

use declineforge_core::models::ModelError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` requires `{missing}` to complete first")]
    Dependency { stage: &'static str, missing: &'static str },
    #[error("stage `{stage}`: training diverged at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
    #[error("stage `{stage}` already has outputs in {path}; pass --force to overwrite")]
    Collision { stage: &'static str, path: PathBuf },
    #[error("manifest {path} is corrupted: {detail}")]
    CorruptManifest { path: PathBuf, detail: String },
    #[error("stage `{stage}` failed: {detail}")]
    Stage { stage: &'static str, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Collision { .. } | CliError::CorruptManifest { .. } => 2,
            CliError::Dependency { .. } => 3,
            CliError::Diverged { .. } => 4,
            CliError::Stage { .. } | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Stage { stage, detail: err.to_string() }
    }

    pub(crate) fn model(stage: &'static str, err: ModelError) -> Self {
        match err {
            ModelError::Diverged { epoch } => CliError::Diverged { stage, epoch },
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::stage(stage, other),
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
