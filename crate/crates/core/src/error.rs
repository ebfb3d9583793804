use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
            Error::Client { source, .. } => source.exit_code(),
            Error::Dimension(_) | Error::Index(_) | Error::Config(_) | Error::Protocol(_) => 2,
        }
    }

    pub(crate) fn at_client(self, round: usize, client: usize) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}
