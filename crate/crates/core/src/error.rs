//! Error type shared across the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NotScalar { shape: Vec<usize> },
    /// Token id outside `[0, vocab)`.
    TokenOutOfRange { token: usize, vocab: usize },
    /// Sequence would exceed the model's maximum context.
    ContextOverflow { needed: usize, max_context: usize },
    /// A configuration or attack-spec invariant was violated.
    InvalidSpec(String),
    /// Training loss became non-finite.
    Diverged { step: usize },
    /// Weight file I/O failure.
    Io(String),
    /// Weight file is malformed (bad magic, version, shape, or truncation).
    BadWeightFile(String),
    /// Curve fit could not run on the given points.
    DegenerateFit(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite output from {op}"),
            Error::NotScalar { shape } => write!(f, "backward requires a scalar loss, got shape {shape:?}"),
            Error::TokenOutOfRange { token, vocab } => write!(f, "token {token} outside vocabulary of size {vocab}"),
            Error::ContextOverflow { needed, max_context } => {
                write!(f, "sequence of {needed} tokens exceeds max context {max_context}")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            Error::Diverged { step } => write!(f, "training loss became non-finite at step {step}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::BadWeightFile(msg) => write!(f, "bad weight file: {msg}"),
            Error::DegenerateFit(msg) => write!(f, "degenerate fit input: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
