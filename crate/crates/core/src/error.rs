use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value (invalid sizes, ranges, counts).
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad runtime argument (shape mismatches, out-of-range timesteps).
    #[error("argument error: {0}")]
    Argument(String),
    /// Missing or inconsistent state (unloaded parameters, missing checkpoints).
    #[error("state error: {0}")]
    State(String),
    /// Checkpoint is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
