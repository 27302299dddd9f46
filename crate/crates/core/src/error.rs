use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed container bytes. `position` is the absolute byte offset in the file.
    #[error("{message} (at byte {position})")]
    Format { position: u64, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible checkpoints, offending tensors: {}", .names.join(", "))]
    Incompatible { names: Vec<String> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(position: u64, message: impl Into<String>) -> Self {
        Error::Format {
            position,
            message: message.into(),
        }
    }
}
