use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so that callers (notably the CLI) can map them
/// onto a small set of exit codes: configuration problems, bad input data,
/// and everything that goes wrong at run time.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("empty signal")]
    EmptySignal,

    #[error("zero-energy reference")]
    ZeroEnergyReference,

    #[error("too short: {0}")]
    TooShort(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parse error in {what} at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("external command `{command}` failed ({status}): {stderr}")]
    External {
        command: String,
        status: String,
        stderr: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::Data { .. } | Error::Wav(_) | Error::Json(_) => {
                ErrorKind::Data
            }
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

pub type Result<T> = std::result::Result<T, Error>;
