use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Malformed binary or text input.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Invalid experiment or training configuration.
    #[error("config error{}: {msg}", fmt_location(.key, .line))]
    Config {
        key: Option<String>,
        line: Option<usize>,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" at `{k}` (line {l})"),
        (Some(k), None) => format!(" at `{k}`"),
        (None, Some(l)) => format!(" (line {l})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            key: None,
            line: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn config_key(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: Some(key.into()),
            line: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } => 3,
            Error::Shape(_) | Error::Domain(_) | Error::NonFinite(_) => 4,
            Error::Io { .. } => 5,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "numeric",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }
}
