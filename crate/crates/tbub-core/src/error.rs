//! Error type shared across the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dim(String),
    /// A softmax row contained only -inf logits.
    AllMaskedRow { row: usize },
    /// An operation received an empty input.
    EmptyInput(&'static str),
    /// Stream budget cannot hold the forced keeps.
    Budget { kappa: usize, originals: usize },
    /// Invalid argument from a caller.
    Arg(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file did not match its expected binary or JSON layout.
    Format(String),
    /// A gradient became non-finite during training.
    NonFiniteGrad { name: String, step: usize },
    /// The training loss became non-finite.
    NanLoss { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::AllMaskedRow { row } => {
                write!(f, "softmax row {row} is entirely -inf")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::Budget { kappa, originals } => write!(
                f,
                "budget {kappa} cannot hold {originals} forced original streams"
            ),
            Error::Arg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::NonFiniteGrad { name, step } => {
                write!(f, "non-finite gradient in `{name}` at step {step}")
            }
            Error::NanLoss { step } => write!(f, "non-finite loss at step {step}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
