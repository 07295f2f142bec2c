use thiserror::Error;

use crate::training::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sequence length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss or gradient. The training loop
    /// attaches the last checkpoint whose parameters were still finite.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: usize,
        detail: String,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
