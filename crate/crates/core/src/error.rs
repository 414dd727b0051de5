use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tile fetch {tile} failed after {attempts} attempts: {message}")]
    Network {
        tile: String,
        attempts: usize,
        message: String,
    },

    #[error("live tile mode unavailable: {0}")]
    LiveUnavailable(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; batch dumped to {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    WouldClobber(PathBuf),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation and config problems are caller mistakes; everything else is
    /// a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::WouldClobber(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
