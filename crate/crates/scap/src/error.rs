use std::io;
use std::path::PathBuf;

use crate::features::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("sample id {id} {detail}")]
    IdMismatch { id: u64, detail: &'static str },
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{}: retention state does not fit this run: {source}", path.display())]
    State {
        path: PathBuf,
        #[source]
        source: scap_core::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] scap_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 configuration, 2 input/output, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(scap_core::Error::InvalidConfig(_)) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Json { .. }
            | Error::Manifest(_)
            | Error::IdMismatch { .. }
            | Error::DimMismatch { .. }
            | Error::State { .. } => 2,
            Error::Core(_) => 3,
        }
    }
}
