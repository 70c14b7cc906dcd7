use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("no observed events; the partial likelihood is undefined")]
    NoEvents,
    #[error("no comparable pairs at horizon {horizon}")]
    NoComparablePairs { horizon: f64 },
    #[error("{0}")]
    Domain(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code class: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NoEvents
            | Error::NoComparablePairs { .. }
            | Error::Domain(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io { .. } => 3,
            Error::Ad(_) | Error::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
