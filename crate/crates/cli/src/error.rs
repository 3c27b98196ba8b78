use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] qlvm_core::Error),
    #[error("output directory {0} is locked by another run (remove .lock if stale)")]
    Locked(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for numerical failures, 1 for everything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl From<qlvm_core::data::CheckpointError> for CliError {
    fn from(e: qlvm_core::data::CheckpointError) -> Self {
        CliError::Core(e.into())
    }
}

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub type Result<T> = std::result::Result<T, CliError>;
