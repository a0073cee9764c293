use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("empty depth range [{low}, {high}]")]
    EmptyRange { low: f64, high: f64 },
    #[error("plane count must be at least 1")]
    ZeroCount,
    #[error("homography has a zero bottom-right entry")]
    DegenerateHomography,
    #[error("image dimensions {width}x{height} are not divisible by 4")]
    BadDimensions { width: usize, height: usize },
    #[error("at least one source view is required")]
    NoSourceViews,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("backward called with a cache that does not match the gradient shape")]
    StaleCache,
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },
    #[error("degenerate scene geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed {kind} file {path}: {msg}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
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

    pub fn format(kind: &'static str, path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "BehindCamera",
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::EmptyRange { .. } => "EmptyRange",
            Error::ZeroCount => "ZeroCount",
            Error::DegenerateHomography => "DegenerateHomography",
            Error::BadDimensions { .. } => "BadDimensions",
            Error::NoSourceViews => "NoSourceViews",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonPositiveTemperature(_) => "NonPositiveTemperature",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::StaleCache => "StaleCache",
            Error::NonPositiveLambda(_) => "NonPositiveLambda",
            Error::EmptyDataset => "EmptyDataset",
            Error::TooFewViews { .. } => "TooFewViews",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::EmptyCloud => "EmptyCloud",
            Error::EmptyMask => "EmptyMask",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
