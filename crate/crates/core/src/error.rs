use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("row {row} is not a probability distribution (sum {sum})")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("channel `{channel}` has zero variance on the fitting range")]
    ZeroVariance { channel: String },
    #[error("causality violation: day {day} context contains sample {index}")]
    Causality { day: usize, index: usize },
    #[error("backward pass requires a forward cache")]
    MissingCache,
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(&'static str),
    #[error("row {row}: {reason}")]
    Data { row: usize, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { what, expected, got }
    }
}
