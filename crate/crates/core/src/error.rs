use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite weight at (expert {expert}, row {row}, col {col})")]
    NonFiniteWeight { expert: usize, row: usize, col: usize },

    #[error("non-finite gate logit at (row {row}, expert {expert})")]
    NonFiniteLogit { row: usize, expert: usize },

    #[error("int4 packing needs a multiple of 8 elements, got {0}")]
    UnalignedInt4(usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
