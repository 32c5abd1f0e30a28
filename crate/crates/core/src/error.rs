use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Decode { offset: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed sequence at position {position}: {detail}")]
    Malformed { position: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced in {0}")]
    NumericOverflow(&'static str),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("problem size {n} exceeds exact-solver cap {cap}; use the greedy solver")]
    Size { n: usize, cap: usize },

    #[error("cannot allocate buffers for {0}")]
    Resource(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn parse(line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn malformed(position: usize, detail: impl Into<String>) -> Self {
        Error::Malformed {
            position,
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
