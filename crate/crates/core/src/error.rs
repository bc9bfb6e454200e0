use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported rank: {0}")]
    UnsupportedRank(String),

    #[error("invalid label {label} (num_classes = {num_classes})")]
    InvalidLabel { label: f64, num_classes: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    DivergedTraining { epoch: usize, step: usize, loss: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}
