use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes violate an operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFinite { step: u64, batch: usize },
}

const USAGE: [&str; 9] = [
    "config",
    "model config",
    "train config",
    "sampling plan",
    "schedule",
    "schedule kind",
    "match mode",
    "synthetic corpus spec",
    "ablation",
];

impl Error {
    /// Process exit status: 1 for configuration problems, 2 for bad or
    /// unreadable data, 3 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Invalid { what, .. } if USAGE.contains(what) => 1,
            _ => 2,
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
