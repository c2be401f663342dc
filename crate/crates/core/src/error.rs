use std::path::PathBuf;

use thiserror::Error;

use crate::skeleton::FilterReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate sequence: {0}")]
    DegenerateSequence(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no skeleton detected")]
    NoSkeleton,

    #[error("every frame was discarded ({0})")]
    EmptySequence(FilterReport),

    #[error("degenerate pose: median torso length {0:e} is too small")]
    DegeneratePose(f64),

    #[error("too few valid joints reachable to repair joint {joint}")]
    Unrepairable { joint: usize },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite value first produced by op #{node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
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

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::NonFinite { .. } | Error::UndefinedCorrelation(_) => 3,
            Error::GradCheck(_) => 4,
            _ => 1,
        }
    }
}
