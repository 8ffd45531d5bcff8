use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Model file decoding failures, one variant per failure kind.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: not an RCMP model file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: &'static str, expected: u64, actual: u64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rcmp_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Stable identifier for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "model",
            Error::Format(FormatError::BadMagic) => "bad_magic",
            Error::Format(FormatError::UnsupportedVersion(_)) => "unsupported_version",
            Error::Format(FormatError::Truncated { .. }) => "truncated",
            Error::Format(FormatError::LengthMismatch(_)) => "length_mismatch",
            Error::Format(FormatError::Manifest(_)) => "manifest",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Data(_) => "data",
            Error::Usage(_) => "usage",
        }
    }
}
