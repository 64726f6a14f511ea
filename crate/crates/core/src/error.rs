//! Error type shared by every module of the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the embedding, fusion, and evaluation pipeline.
#[derive(Debug)]
pub enum Error {
    /// A vector that must be normalized has (near-)zero Euclidean norm.
    /// The context names the degenerate object (pixel, segment, query).
    ZeroNorm { context: String },
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An argument violates a documented precondition.
    InvalidArgument(String),
    /// A value that must be finite is NaN or infinite.
    NonFinite { context: String },
    /// The scene generator cannot satisfy the requested configuration.
    InfeasibleConfig(String),
    /// A loss evaluation was given an image with no labeled pixels.
    NoValidPixels,
    /// The training loss became non-finite.
    DivergedLoss { iter: usize, value: f64 },
    /// Oracle query construction requires ground truth but none was given.
    MissingScene,
    /// Per-category instance classification requires an unmerged memory bank.
    MergedBank,
    /// A file does not conform to its declared format.
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ZeroNorm { context } => {
                write!(f, "zero-norm vector: {context}")
            }
            Error::ShapeMismatch {
                context,
                left,
                right,
            } => write!(
                f,
                "shape mismatch in {context}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InfeasibleConfig(msg) => write!(f, "infeasible config: {msg}"),
            Error::NoValidPixels => write!(f, "every pixel is void; nothing to optimize"),
            Error::DivergedLoss { iter, value } => {
                write!(f, "loss diverged at iteration {iter} (value {value})")
            }
            Error::MissingScene => {
                write!(f, "oracle queries require ground-truth scene data")
            }
            Error::MergedBank => write!(
                f,
                "memory bank was trained with merged thing classes; per-category vectors unavailable"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
