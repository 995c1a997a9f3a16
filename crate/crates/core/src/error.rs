use std::path::PathBuf;

use crate::graph::NodeKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("relation kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch {
        expected: (NodeKind, NodeKind),
        found: (NodeKind, NodeKind),
    },

    #[error("{kind:?} count mismatch: {left} declared by {left_source}, {right} by {right_source}")]
    CountMismatch {
        kind: NodeKind,
        left: usize,
        left_source: &'static str,
        right: usize,
        right_source: &'static str,
    },

    #[error("index {index} out of range for {kind:?} count {count}")]
    IndexOutOfRange {
        kind: NodeKind,
        index: usize,
        count: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("relation {0} is empty")]
    EmptyRelation(&'static str),

    #[error("degree regime mismatch: expected {expected}, got {found}")]
    RegimeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("brute-force oracle cap exceeded: {nodes} nodes > cap {cap}")]
    CapExceeded { nodes: usize, cap: usize },

    #[error("no positive-consistency pairs: {0}")]
    EmptyPositiveSet(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("variant {variant} cannot run on this data: {reason}")]
    VariantData { variant: String, reason: String },

    #[error("no recommendee has a non-empty ground truth")]
    NoGroundTruth,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage} training produced a non-finite loss at epoch {epoch}")]
    Diverged { stage: String, epoch: usize },

    #[error("{stage} training interrupted after epoch {epoch}")]
    Interrupted { stage: String, epoch: usize },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
