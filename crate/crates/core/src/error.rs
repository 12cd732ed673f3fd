use thiserror::Error;

/// Errors raised by the camera geometry routines.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("radius {r} exceeds the image circle radius {r_max}")]
    OutOfRange { r: f64, r_max: f64 },
    #[error("distortion polynomial is not strictly increasing on [0, theta_max]")]
    NonMonotone,
    #[error("no monotone calibration found after {attempts} draws")]
    SamplingExhausted { attempts: usize },
}

/// Errors raised when buffers of incompatible sizes meet.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Errors raised by losses and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MetricError {
    #[error("no jointly valid pixels")]
    EmptyMask,
    #[error("non-positive depth {0} in a valid pixel")]
    NonPositiveDepth(f64),
}

/// Crate-wide error.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
