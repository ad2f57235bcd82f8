use std::io;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("requested {requested} samples from only {available} inputs")]
    CountExceedsInput { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("max-pool group {0} is empty")]
    EmptyGroup(usize),

    #[error("all corners of the region lie behind the camera")]
    NoVisibleCorners,

    #[error("segmentation mask selected no foreground points")]
    NoForegroundPoints,

    #[error("angle bin {bin} out of range for {bins} bins")]
    BinOutOfRange { bin: usize, bins: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("missing key {0}")]
    MissingKey(String),

    #[error("could not place object after {0} attempts")]
    PlacementFailure(usize),

    #[error("checkpoint incompatible with configuration: {0}")]
    IncompatibleCheckpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::IncompatibleCheckpoint(_))
    }
}
