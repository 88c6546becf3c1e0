use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed values that violate an operation's preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    /// An earlier pipeline stage has not produced its artifact yet.
    #[error("missing {path}: run `retarget {command}` first")]
    Stage {
        path: PathBuf,
        command: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status: 2 configuration or usage, 3 input/output,
    /// 4 numerical failure, 5 internal shape error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Missing(_) | Error::Stage { .. } | Error::Io(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Shape { .. } => 5,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
