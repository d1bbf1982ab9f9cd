use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the library.
///
/// The CLI maps these onto exit codes via [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation's contract.
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("optimizer error on parameter `{name}`: {reason}")]
    Optimizer { name: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("empty window")]
    EmptyWindow,

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("shape mismatch in `{section}`: {detail}")]
    ShapeMismatch { section: String, detail: String },

    #[error("corrupt section `{section}`: {detail}")]
    CorruptSection { section: String, detail: String },

    #[error("unknown sequence `{0}`")]
    UnknownSequence(String),

    #[error("checkpoint incompatible with data: {0}")]
    Incompatible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Incompatible(_) => ErrorCategory::Config,
            Error::MissingFile(_)
            | Error::VersionMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::CorruptSection { .. }
            | Error::UnknownSequence(_)
            | Error::TooShort(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Degenerate(_)
            | Error::Optimizer { .. }
            | Error::EmptyWindow
            | Error::Alignment(_)
            | Error::Numerical(_) => ErrorCategory::Numerical,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
