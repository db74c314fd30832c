use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, #[source] std::io::Error),
    #[error("stage dependency: `{stage}` needs {} (produced by `{producer}`)", .path.display())]
    MissingArtifact {
        stage: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error(transparent)]
    Core(#[from] ragr_core::error::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Io(..) | CliError::Core(_) => 1,
        }
    }
}
