use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced in {layer}")]
    NonFinite { layer: &'static str },

    #[error("{}: parse error at byte offset {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("simulation error at t={time} (client {client:?}): {source}")]
    Simulation {
        time: u64,
        client: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed envelope: {0}")]
    Envelope(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            context,
            expected,
            got,
        })
    }
}
