use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file is {len} bytes, too short for the 8-byte header length")]
    Truncated { len: usize },
    #[error("header length {header_len} exceeds the {available} bytes after the length prefix")]
    HeaderLength { header_len: u64, available: usize },
    #[error("header is not a valid JSON object: {0}")]
    HeaderParse(String),
    #[error("tensor `{name}`: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("tensor `{name}` has unknown dtype `{dtype}`")]
    UnknownDType { name: String, dtype: String },
    #[error("tensor `{name}`: data offsets [{begin}, {end}) {reason}")]
    DataOffsets {
        name: String,
        begin: u64,
        end: u64,
        reason: String,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] lewis_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Error {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
