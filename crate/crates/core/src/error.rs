//! Crate-wide error type. One flat enum keeps exit-code mapping in the CLI
//! trivial: usage/config problems, data/checkpoint problems, and training
//! divergence are distinguishable without downcasting.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a parameter) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An index (class label, expert id, vocab id, ...) is outside its bound.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Softmax/gate input had every entry masked out.
    AllMasked,
    /// A gradient went non-finite; carries the offending parameter name.
    NonFiniteGrad { param: String },
    /// Training loss went non-finite at the given step.
    Diverged { stage: String, step: usize },
    /// Invalid configuration (bad hyperparameter, geometry mismatch, ...).
    Config(String),
    /// Routing produced an unusable decision (non-finite logits, bad expert id).
    Routing(String),
    /// A checkpoint file is missing, truncated or corrupt; names the section.
    Checkpoint { section: String, detail: String },
    /// Filesystem failure with path context.
    Io { path: PathBuf, detail: String },
    /// A text file (manifest, config) failed to parse; names the line.
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    /// A binary data file (dataset records) is malformed or truncated.
    Data { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::AllMasked => write!(f, "invalid gate: every entry is masked"),
            Error::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient in parameter `{param}`")
            }
            Error::Diverged { stage, step } => {
                write!(f, "training diverged in stage {stage} at step {step}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Routing(msg) => write!(f, "routing error: {msg}"),
            Error::Checkpoint { section, detail } => {
                write!(f, "checkpoint section `{section}`: {detail}")
            }
            Error::Io { path, detail } => write!(f, "{}: {detail}", path.display()),
            Error::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            Error::Data { path, detail } => write!(f, "{}: {detail}", path.display()),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Wrap a std::io::Error with the path it concerned.
    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            detail: err.to_string(),
        }
    }
}
