use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("invalid sparse matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0} is empty")]
    EmptyNodeSet(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot build split: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: &'static str },

    #[error("cannot write csv: {0}")]
    Csv(#[from] csv::Error),
}
