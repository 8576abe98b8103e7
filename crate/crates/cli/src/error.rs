use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// An upstream stage artifact that this stage consumes does not exist.
    #[error("missing upstream stage '{stage}' (expected {dir}); run `lesionflow {command}` first")]
    MissingStage {
        stage: String,
        dir: PathBuf,
        command: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lesionflow_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
