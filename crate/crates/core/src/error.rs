use thiserror::Error;

use nalgebra::Matrix3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point count mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),

    #[error("point cloud must contain at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cross-covariance is zero; alignment is undefined")]
    ZeroCrossCovariance,

    #[error("Laplace expansion singular: pairwise singular-value sum {sum:e} <= {threshold:e}")]
    ExpansionSingular { sum: f64, threshold: f64 },

    #[error("quadrature did not converge up to resolution {resolution} (last change {change:e})")]
    NoConvergence {
        resolution: usize,
        change: f64,
        last: Box<Matrix3<f64>>,
        previous: Box<Matrix3<f64>>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
