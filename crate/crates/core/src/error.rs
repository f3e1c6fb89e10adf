//! Crate-wide error type.

use std::fmt;

/// Errors produced by any layer of the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor or mask shapes do not agree.
    ShapeMismatch(String),
    /// A layer or network configuration is internally inconsistent.
    InvalidConfig(String),
    /// Vector lengths disagree (labels, predictions, fold inputs).
    LengthMismatch(String),
    /// `backward` was called on a non-scalar node.
    NotScalar(Vec<usize>),
    /// `backward` was called on a tape with no recorded nodes.
    EmptyTape,
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
    /// AUC is undefined because only one class is present.
    UndefinedAuc,
    /// An operation received the wrong number of inputs.
    WrongArity(String),
    /// A file could not be parsed; carries the byte offset where parsing failed.
    Parse { path: String, offset: u64, message: String },
    /// A pipeline stage was invoked before its prerequisite stage ran.
    MissingPrerequisite { stage: String },
    /// A checkpoint was loaded against a different configuration.
    ConfigMismatch(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            Error::LengthMismatch(m) => write!(f, "length mismatch: {m}"),
            Error::NotScalar(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::EmptyTape => write!(f, "backward called on an empty tape"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::UndefinedAuc => {
                write!(f, "AUC is undefined: need at least one positive and one negative label")
            }
            Error::WrongArity(m) => write!(f, "wrong arity: {m}"),
            Error::Parse { path, offset, message } => {
                write!(f, "parse error in {path} at byte {offset}: {message}")
            }
            Error::MissingPrerequisite { stage } => {
                write!(f, "missing prerequisite: run `{stage}` first")
            }
            Error::ConfigMismatch(m) => write!(f, "checkpoint/config mismatch: {m}"),
            Error::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
