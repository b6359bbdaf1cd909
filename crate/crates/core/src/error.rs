use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },
    #[error("index {index} out of range (limit {limit}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token layout does not match sequence: {0}")]
    Layout(String),
    #[error("unsupported combination: {0}")]
    Unsupported(&'static str),
    #[error("missing state: {0}")]
    MissingState(&'static str),
    #[error("segment `{0}` is empty")]
    EmptySegment(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("top-k set must have exactly {expected} distinct tokens, got {got}")]
    SetSize { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("sequence length {len} exceeds max_seq {max}")]
    Overflow { len: usize, max: usize },
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("invalid task spec: {0}")]
    Task(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn at_example(self, index: usize) -> Self {
        Error::Example {
            index,
            source: alloc::boxed::Box::new(self),
        }
    }
}
