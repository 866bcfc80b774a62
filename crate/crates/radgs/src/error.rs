//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Fewer observations than unknowns in a least-squares solve.
    #[error("underdetermined solve: {got} observations, need at least {needed}")]
    Underdetermined { needed: usize, got: usize },

    /// Normal-equation or covariance matrix is singular to working precision.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: &'static str },

    /// Rotation logarithm at or near the pi-rotation cut where the axis is ambiguous.
    #[error("rotation angle within {margin} of pi; logarithm axis is ill-defined")]
    AngleNearPi { margin: f64 },

    /// A point passed to the octree lies outside the declared bounds.
    #[error("point {index} lies outside the octree bounds")]
    PointOutOfBounds { index: usize },

    /// An operation that needs map content ran against an empty map.
    #[error("operation requires a non-empty map")]
    EmptyMap,

    /// Tracking could not associate enough points to constrain the pose.
    #[error("tracking degenerate: only {matches} point-to-Gaussian matches (need {needed})")]
    TrackingDegenerate { matches: usize, needed: usize },

    /// Interpolation parameter outside its valid interval.
    #[error("parameter {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    /// Invalid configuration value.
    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },

    /// Malformed or inconsistent dataset content.
    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
