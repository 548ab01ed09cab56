use thiserror::Error;

/// Every fallible operation in the crate reports one of these categories.
#[derive(Debug, Error)]
pub enum Error {
    #[error("DimensionError: {0}")]
    Dimension(String),
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("WeightError: {0}")]
    Weight(String),
    #[error("FormatError: {0}")]
    Format(String),
    #[error("RangeError: {0}")]
    Range(String),
    #[error("DegenerateBandError: band {band} has zero standard deviation")]
    DegenerateBand { band: usize },
    #[error("DegenerateSampleError: {0}")]
    DegenerateSample(String),
    #[error("EmptyGeometryError: {0}")]
    EmptyGeometry(String),
    #[error("TrainingError: {0}")]
    Training(String),
    #[error("IoError: {0}")]
    Io(std::io::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Short category name, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DimensionError",
            Error::Config(_) => "ConfigError",
            Error::Weight(_) => "WeightError",
            Error::Format(_) => "FormatError",
            Error::Range(_) => "RangeError",
            Error::DegenerateBand { .. } => "DegenerateBandError",
            Error::DegenerateSample(_) => "DegenerateSampleError",
            Error::EmptyGeometry(_) => "EmptyGeometryError",
            Error::Training(_) => "TrainingError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
