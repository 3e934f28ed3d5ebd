use std::fmt;

/// Errors produced anywhere in the alignment engine.
#[derive(Debug, thiserror::Error)]
pub enum XabaError {
    /// Inputs are mutually inconsistent (channel counts, shapes, names).
    #[error("config: {0}")]
    Config(String),
    /// A documented precondition does not hold (divisibility, ranges).
    #[error("precondition: {0}")]
    Precondition(String),
    /// An operation was requested on a graph that is not in a valid state for it.
    #[error("state: {0}")]
    State(String),
    /// Malformed file contents, with the byte offset where decoding failed.
    #[error("format: {msg} (at byte {offset})")]
    Format { offset: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl XabaError {
    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        XabaError::Config(msg.to_string())
    }

    pub(crate) fn precondition(msg: impl fmt::Display) -> Self {
        XabaError::Precondition(msg.to_string())
    }

    pub(crate) fn format(offset: usize, msg: impl fmt::Display) -> Self {
        XabaError::Format {
            offset,
            msg: msg.to_string(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            XabaError::Config(_) => "config",
            XabaError::Precondition(_) => "precondition",
            XabaError::State(_) => "state",
            XabaError::Format { .. } => "format",
            XabaError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = XabaError> = std::result::Result<T, E>;
