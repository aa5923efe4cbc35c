use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    Bounds { token: u32, vocab: usize },

    #[error("capacity exceeded: sequence of {requested} positions exceeds max_seq {max_seq}")]
    Capacity { requested: usize, max_seq: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("tree structure error: {0}")]
    Structure(String),

    #[error("drafting contract violation: {0}")]
    Drafting(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("non-finite loss at position {position}")]
    Loss { position: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("session aborted: {0}")]
    Session(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
