use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability vector is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain expansion requested in the middle of an epoch")]
    MidEpochExpansion,

    #[error("operation requires labels: {0}")]
    MissingLabels(String),

    #[error("operation not available in {0} mode")]
    ModeMismatch(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("array container error: {0}")]
    Array(String),

    #[error("image encoding error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in CLI error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotNormalized(_) => "not_normalized",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::MidEpochExpansion => "mid_epoch_expansion",
            Error::MissingLabels(_) => "missing_labels",
            Error::ModeMismatch(_) => "mode_mismatch",
            Error::CheckpointNotFound(_) => "checkpoint_not_found",
            Error::Dataset(_) => "dataset_error",
            Error::Config(_) => "config_error",
            Error::Io { .. } => "io_error",
            Error::Array(_) => "array_error",
            Error::Image(_) => "image_error",
            Error::Csv(_) => "csv_error",
            Error::Json(_) => "json_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}
