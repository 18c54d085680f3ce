//! Calibration evaluation toolkit: bundle adjustment, systematic-error
//! detection and uncertainty benchmarking for single-camera calibration.

pub mod bias;
pub mod calib;
pub mod camera;
mod error;
pub mod experiments;
pub mod sim;
pub mod solver;
pub mod stats;
pub mod uncertainty;

pub use calib::{
    calibrate, standard_covariance, CalibrationOptions, CalibrationResult, CovarianceEstimate, CovarianceMethod, Dataset, Frame,
    Observation, TargetGeometry,
};
pub use camera::{CameraModel, Family, Pose};
pub use error::{Error, Result};
