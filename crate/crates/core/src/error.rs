use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no attention block for layer {layer}, head {head}")]
    MissingTrace { layer: usize, head: usize },

    #[error("clip {got} pushed after clip {last}; clip ids must increase")]
    OutOfOrderClip { last: u64, got: u64 },

    #[error("context overflow: {0}")]
    ContextOverflow(String),

    #[error("caption store is empty")]
    EmptyStore,

    #[error("malformed trace at byte {offset}: {reason}")]
    TraceFormat { offset: u64, reason: String },

    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),

    #[error("line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn invalid_dim(msg: impl Into<String>) -> Error {
    Error::InvalidDimension(msg.into())
}
