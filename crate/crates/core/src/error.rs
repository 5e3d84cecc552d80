use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown {kind}: {id}")]
    Lookup { kind: &'static str, id: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("illegal state transition {from} -> {to}")]
    StateMachine { from: String, to: String },

    #[error("immutable: {0}")]
    Immutable(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("snapshot corrupt at byte offset {offset}: {reason}")]
    Snapshot { offset: u64, reason: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no adaptor registered for scheme {0:?}")]
    Adaptor(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("capacity exceeded on {pilot}: need {needed} bytes, {available} available")]
    Capacity {
        pilot: String,
        needed: u64,
        available: u64,
    },

    #[error("staging error: {0}")]
    Staging(String),

    #[error("cost model error: {0}")]
    Model(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("coordination store is unavailable (injected crash)")]
    Crashed,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    pub fn lookup(kind: &'static str, id: impl ToString) -> Self {
        Error::Lookup {
            kind,
            id: id.to_string(),
        }
    }

    /// True for errors caused by bad input rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Lookup { .. } | Error::Argument(_) | Error::Adaptor(_)
        )
    }
}
