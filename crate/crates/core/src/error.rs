use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value at iteration {iteration} in {context}")]
    NonFinite { iteration: usize, context: String },

    #[error("agent {agent} failed at iteration {iteration}: {source}")]
    Agent {
        agent: String,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("denoiser sidecar: {0}")]
    Sidecar(String),

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::DimMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

/// Problems decoding a binary volume file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("expected {expected} volume, file holds {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("truncated file: {needed} bytes needed, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("header dims describe {header_values} values but payload holds {payload_values}")]
    LengthMismatch {
        header_values: usize,
        payload_values: usize,
    },
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error("refusing to store non-finite value at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error, PartialEq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}
