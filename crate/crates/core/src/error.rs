use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no configuration fits a budget of {budget_bits} bits (smallest is {smallest_bits} bits)")]
    Infeasible { budget_bits: u64, smallest_bits: u64 },

    #[error("no configuration reaches error {max_error} (best is {best_error})")]
    UnreachableAccuracy { max_error: f64, best_error: f64 },

    #[error("integrity check failed for chunk {chunk_index}: {detail}")]
    Integrity { chunk_index: u32, detail: String },

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error {code}: {detail}")]
    Remote { code: u16, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
