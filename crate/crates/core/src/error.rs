//! Error type shared across the simulator.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A tensor or model had a different shape than the operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An index (split point, layer, client id) was outside its valid range.
    #[error("{what} out of range: {got} not in [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        got: usize,
        lo: usize,
        hi: usize,
    },

    /// A caller-supplied value violated an argument contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value appeared where the contract requires finite ones.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A precondition on mutable state did not hold (e.g. stale tape).
    #[error("state error: {0}")]
    State(String),

    /// No split point satisfies the device's power cap.
    #[error("client {client_id} has no feasible split point under its power cap")]
    InfeasibleClient { client_id: usize },

    /// A procedure was invoked outside its contract (e.g. reassignment
    /// when the accuracy target is already met).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A persisted artifact (checkpoint, table, schedule) failed to parse.
    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
