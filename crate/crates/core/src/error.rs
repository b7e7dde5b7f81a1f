use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("run with seed {seed} failed: {source}")]
    Suite {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
