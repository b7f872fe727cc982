use std::path::PathBuf;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape4,
        right: Shape4,
    },

    #[error("invalid shape {shape} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Shape4,
        reason: String,
    },

    #[error("spatial dims {h}x{w} too small for {op}: need at least {min}x{min}")]
    TooSmall {
        op: &'static str,
        h: usize,
        w: usize,
        min: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("forward pass of `{0}` is not deterministic")]
    NonDeterministic(String),

    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{} has no counterpart {}", found.display(), missing.display())]
    MissingPair { found: PathBuf, missing: PathBuf },

    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: png: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
