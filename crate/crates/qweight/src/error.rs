use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] qweight_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a qweight container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated in section `{section}`")]
    Truncated { section: &'static str },
    #[error("checksum mismatch in section `{section}`")]
    ChecksumMismatch { section: &'static str },
    #[error("section `{section}` is inconsistent: {reason}")]
    InconsistentSection { section: &'static str, reason: String },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn inconsistent(section: &'static str, reason: impl Into<String>) -> Self {
        Self::InconsistentSection {
            section,
            reason: reason.into(),
        }
    }
}
