use thiserror::Error;

/// Failures while reading or writing PGM/PPM files.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("wrong magic: expected {expected}, found {found:?}")]
    WrongMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("short file: expected {expected} pixel bytes, found {found}")]
    ShortFile { expected: usize, found: usize },
}

/// Failures while decoding a serialized model.
#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated model file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric divergence at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code for this failure: 1 for numeric/training trouble,
    /// 2 for everything the caller could fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numeric(_) | Error::Generation(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
