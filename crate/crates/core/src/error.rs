use alloc::string::String;
use core::fmt;

pub type Result<T, E = CoreError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A caller-supplied argument is outside its documented domain.
    Argument(String),
    /// Malformed textual input (grammar, corpus text). `line` is 1-based.
    Parse { line: usize, message: String },
    /// An encoded sequence does not fit the model context.
    Length { needed: usize, limit: usize },
    /// A character outside the tokenizer's training alphabet.
    UnknownSymbol(char),
    /// The operation is not valid for the current state.
    State(String),
    /// Training produced a NaN or infinite loss.
    NonFiniteLoss { epoch: usize, step: usize },
    /// Parameter data does not agree with the model configuration.
    Shape(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Argument(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            CoreError::Length { needed, limit } => {
                write!(f, "sequence of {needed} tokens exceeds context length {limit}")
            }
            CoreError::UnknownSymbol(c) => write!(f, "character {c:?} is not in the vocabulary"),
            CoreError::State(msg) => write!(f, "invalid state: {msg}"),
            CoreError::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}; training aborted")
            }
            CoreError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Argument(msg.into()))
}
