use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("Remove filter eliminated all examples")]
    RemoveEliminatedAll,

    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),

    #[error("degenerate distribution: {0}")]
    Degenerate(&'static str),

    #[error("example has no cheat token")]
    MissingCheatToken,

    #[error("vocabulary hash mismatch: checkpoint has {checkpoint}, data has {data}")]
    VocabMismatch { checkpoint: String, data: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
