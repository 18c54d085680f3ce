//! Shared fixtures for the criterion benches.

use calibaudit_core::calib::Initialization;
use calibaudit_core::sim::{simulate_with_poses, SimConfig};
use calibaudit_core::{calibrate, CalibrationOptions, CalibrationResult, Dataset};

/// Simulated standard dataset and its calibration, started from the truth so
/// that setup stays cheap.
pub fn fixture(n_frames: usize, seed: u64) -> (SimConfig, Dataset, CalibrationResult) {
    let cfg = SimConfig::standard(n_frames, seed);
    let (ds, poses) = simulate_with_poses(&cfg).expect("simulation");
    let opts = CalibrationOptions { init: Initialization::Full { camera: cfg.truth.clone(), poses }, ..Default::default() };
    let res = calibrate(&ds, cfg.truth.family(), &opts).expect("calibration");
    (cfg, ds, res)
}
