use std::path::PathBuf;

use riskroute_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing stage {stage} artifact: {path}")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("artifact {path} has stage `{found}`, expected `{expected}`")]
    WrongStage { path: PathBuf, expected: &'static str, found: String },
    #[error("theory check failed: {0}")]
    Theory(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 stage order, 4 theory, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::Config(_)) => 2,
            CliError::MissingStage { .. } | CliError::WrongStage { .. } | CliError::Core(CoreError::Provenance(_)) => 3,
            CliError::Theory(_) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
