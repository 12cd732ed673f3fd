use std::io;
use std::path::{Path, PathBuf};

use caltok_core::error::{Error as CoreError, GeometryError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaltokError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, CaltokError>;

impl CaltokError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 configuration or parse, 3 I/O, 4 numeric domain.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 3,
            Self::Format { .. } | Self::Json { .. } | Self::Config(_) => 2,
            Self::Core(CoreError::Shape(_)) => 2,
            Self::Core(CoreError::Geometry(_) | CoreError::Metric(_)) => 4,
        }
    }
}

impl From<GeometryError> for CaltokError {
    fn from(e: GeometryError) -> Self {
        Self::Core(e.into())
    }
}

impl From<caltok_core::error::ShapeError> for CaltokError {
    fn from(e: caltok_core::error::ShapeError) -> Self {
        Self::Core(e.into())
    }
}

impl From<caltok_core::error::MetricError> for CaltokError {
    fn from(e: caltok_core::error::MetricError) -> Self {
        Self::Core(e.into())
    }
}
