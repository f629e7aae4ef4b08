use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("worker {worker} failed: {msg}")]
    Worker { worker: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
