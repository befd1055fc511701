use std::io;

use thiserror::Error;

/// Errors raised anywhere in the encoding, selection, and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("autograd error: {0}")]
    Autograd(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 checkpoint, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data(_) => 3,
            Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config { .. } => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Autograd(_) => "autograd",
            Error::Io(_) => "io",
        }
    }

    /// Single-line `error kind=... [field=...] message="..."` record.
    pub fn machine_line(&self) -> String {
        let message = match self {
            Error::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        let field = match self {
            Error::Config { field, .. } => format!(" field={field}"),
            _ => String::new(),
        };
        format!(
            "error kind={}{field} code={} message={:?}",
            self.kind(),
            self.exit_code(),
            message.replace('\n', " ")
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
