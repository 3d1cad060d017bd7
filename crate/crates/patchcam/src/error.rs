use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] patchcam_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 usage, 2 data or format, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use patchcam_core::Error as E;
        match self {
            Error::Usage(_) => 1,
            Error::Core(E::NumericFailure(_)) => 3,
            Error::Core(E::InvalidArgument(_) | E::UnknownPreset(_)) => 1,
            Error::Core(_) | Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
        }
    }
}
