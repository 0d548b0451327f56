use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, token counts, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed (out-of-vocabulary id, negative duration, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized file is corrupt or has the wrong layout.
    #[error("format error at byte {offset} in {path}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Checkpoint/config combination cannot be applied.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Bad key, value, or missing field in a config file.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
