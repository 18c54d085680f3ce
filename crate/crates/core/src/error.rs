use thiserror::Error;

use crate::camera::CameraError;
use crate::solver::SolverError;

/// Errors raised by the calibration and audit pipelines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("{n} residuals cannot determine {n_params} parameters")]
    InsufficientObservations { n: usize, n_params: usize },
    #[error("pose refit needs at least 4 corners, got {0}")]
    TooFewCorners(usize),
    #[error("target needs at least 2x2 corners")]
    TargetTooSmall,
    #[error("no grid cell holds enough residuals")]
    TooFewResiduals,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive semi-definite (smallest eigenvalue {0})")]
    NotPsd(f64),
    #[error("evaluation grid too small: {rows} rows for {params} parameters")]
    GridTooSmall { rows: usize, params: usize },
    #[error("{failed} of {total} resampling replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("could not place the target inside the image")]
    CannotPlaceTarget,
}

impl Error {
    /// Whether the error stems from invalid input rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDataset(_)
                | Error::InvalidConfig(_)
                | Error::InsufficientObservations { .. }
                | Error::TooFewCorners(_)
                | Error::TargetTooSmall
                | Error::DimensionMismatch(_)
                | Error::GridTooSmall { .. }
                | Error::Camera(CameraError::InvalidParameters(_) | CameraError::UnknownFamily(_))
                | Error::Solver(SolverError::InvalidInput(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
