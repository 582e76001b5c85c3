use std::fmt;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Dims,
        right: Dims,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty loss: the mask selects no position")]
    EmptyLoss,

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenId { id: usize, vocab: usize },

    #[error("sample `{sample}`: {reason}")]
    Sample { sample: String, reason: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("dangling reference {reference} on line {line}")]
    Dangling { line: usize, reference: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: Dims(left.to_vec()),
            right: Dims(right.to_vec()),
        }
    }

    /// True for errors caused by bad inputs rather than by the environment.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shape list rendered as `[2x3]` in messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}
