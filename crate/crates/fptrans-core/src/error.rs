use std::path::PathBuf;
use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch; `detail` names the offending shapes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Fewer background pixels than requested partition regions.
    #[error("partition infeasible: {background} background pixels < {requested} regions")]
    PartitionInfeasible { background: usize, requested: usize },

    /// The episode cannot be used for training/evaluation and must be resampled.
    #[error("invalid episode: {reason}")]
    EpisodeInvalid { reason: String },

    /// Episode sampling cannot satisfy the request (e.g. too few images in a class).
    #[error("sampling error: {reason}")]
    Sampling { reason: String },

    /// Bad configuration value or file.
    #[error("config error: {reason}")]
    Config { reason: String },

    /// Malformed input file; `offset` is the byte position where parsing stopped.
    #[error("parse error in {path} at byte {offset}: {reason}")]
    Parse {
        path: String,
        offset: usize,
        reason: String,
    },

    /// A gradient or loss component left the finite range.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
