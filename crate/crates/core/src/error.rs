use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed on-disk data: bad magic, truncated payload, undecodable header.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Individually well-formed files that disagree with each other.
    #[error("consistency error in {path}: {detail}")]
    Consistency { path: PathBuf, detail: String },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn consistency(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Consistency { path: path.into(), detail: detail.into() }
    }

    /// Short stable tag used by the CLI's machine-parseable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Format { .. } => "format",
            Error::Consistency { .. } => "consistency",
            Error::Version { .. } => "version",
            Error::Divergence { .. } => "divergence",
            Error::Degenerate(_) => "degenerate",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
            Error::Config(_) => "config",
        }
    }
}
