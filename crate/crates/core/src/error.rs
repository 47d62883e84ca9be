use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization engine.
#[derive(Debug, Error)]
pub enum GeolocError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported tensor file version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("coarse match failure: {0}")]
    CoarseMatchFailure(String),

    #[error("homography estimation failed: {0}")]
    Estimation(String),

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("unsupported latitude {0}: the local equirectangular model needs |lat| < 89.9")]
    UnsupportedLatitude(f64),

    #[error("non-finite training loss at pair {pair_index} (epoch step {step}): {detail}")]
    NonFiniteLoss {
        pair_index: usize,
        step: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl GeolocError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeolocError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        GeolocError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input data rather than settings.
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            GeolocError::Format(_)
                | GeolocError::UnsupportedVersion { .. }
                | GeolocError::Json { .. }
                | GeolocError::Image { .. }
                | GeolocError::Dimension(_)
        )
    }
}

pub type Result<T, E = GeolocError> = std::result::Result<T, E>;
