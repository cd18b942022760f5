use alloc::string::String;

/// Errors raised by the routing core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown task id {0}")]
    UnknownTask(u32),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("stage provenance violated: {0}")]
    Provenance(String),
    #[error("missing hindsight entry for task {task} seed {seed}")]
    MissingHindsight { task: u32, seed: u64 },
}

pub type Result<T> = core::result::Result<T, Error>;
