use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DbdError>;

#[derive(Debug, Error)]
pub enum DbdError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("load error ({path}): {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {components}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        components: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DbdError {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        DbdError::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Errors that stem from user input rather than from running a computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            DbdError::Config(_)
                | DbdError::Argument(_)
                | DbdError::Dimension(_)
                | DbdError::Geometry(_)
        )
    }
}
