use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation's contract.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input outside the mathematical domain of an operation (log of a
    /// non-positive value, fractional power of a negative base, ...).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary input; `offset` is the byte position of the problem.
    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Loss or parameters stopped being finite during optimization.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
