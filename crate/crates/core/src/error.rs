use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("row {0} has zero norm")]
    ZeroNorm(usize),

    #[error("batch of {0} rows is too small for batch normalization in train mode")]
    BatchTooSmall(usize),

    #[error("batch normalization running statistics were never populated")]
    UntrainedBatchNorm,

    #[error("entry {value} at position {index} is not a binary code value")]
    NonBinary { index: usize, value: f64 },

    #[error("{classes} distinct codes do not fit in {bits} bits")]
    CodebookCapacity { classes: usize, bits: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
