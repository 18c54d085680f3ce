//! Systematic-error audit: detector noise from virtual sub-targets, the
//! resulting bias estimate and bias ratio, and a histogram KL-divergence
//! baseline.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::calib::{pose_only_refit, CalibrationResult, Dataset, Observation, TargetGeometry};
use crate::error::{Error, Result};
use crate::stats;

/// Splits the corner grid into disjoint 2x2 blocks, row-major. A trailing
/// odd row or column is dropped.
pub fn decompose_virtual_targets(target: &TargetGeometry) -> Result<Vec<[usize; 4]>> {
    if target.rows < 2 || target.cols < 2 {
        return Err(Error::TargetTooSmall);
    }
    let c = target.cols;
    let mut quads = Vec::new();
    for r in (0..target.rows - 1).step_by(2) {
        for k in (0..c - 1).step_by(2) {
            quads.push([r * c + k, r * c + k + 1, (r + 1) * c + k, (r + 1) * c + k + 1]);
        }
    }
    Ok(quads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptions {
    /// Skip virtual targets containing a corner whose calibration residual
    /// exceeds `screen_sigmas` robust standard deviations (gross outliers).
    pub screen_outliers: bool,
    pub screen_sigmas: f64,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self { screen_outliers: true, screen_sigmas: 6.0 }
    }
}

/// Detector-noise estimate from pose-only refits of virtual targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Estimated detector noise variance, px^2.
    pub sigma_d_sq: f64,
    /// Virtual targets that entered the pool.
    pub n_virtual_targets: usize,
    /// Refits that failed and were skipped.
    pub n_failed: usize,
    /// Virtual targets skipped because they contain a gross outlier.
    pub n_screened: usize,
    /// Number of pooled residual components (8 per virtual target).
    pub pool_size: usize,
}

/// Refits every fully observed virtual target of every frame with the
/// calibrated intrinsics fixed, pools the refit residuals and returns
/// `4 (1.4826 MAD)^2`; the factor 4 undoes the 8-observation / 6-parameter
/// redundancy of a single refit.
pub fn estimate_detector_noise(result: &CalibrationResult, dataset: &Dataset, opts: &NoiseOptions) -> Result<NoiseEstimate> {
    let ds = dataset.normalized();
    if ds.num_frames() != result.num_frames() {
        return Err(Error::DimensionMismatch(format!(
            "calibration has {} frames, dataset {}",
            result.num_frames(),
            ds.num_frames()
        )));
    }
    let target = if result.planar { ds.target.planar() } else { ds.target.clone() };
    let quads = decompose_virtual_targets(&target)?;
    let threshold = opts.screen_sigmas * result.robust_mse.sqrt();

    let mut offsets = Vec::with_capacity(ds.num_frames());
    let mut acc = 0;
    for f in &ds.frames {
        offsets.push(acc);
        acc += 2 * f.obs.len();
    }

    let per_frame: Vec<(Vec<f64>, usize, usize, usize)> = ds
        .frames
        .par_iter()
        .enumerate()
        .map(|(j, frame)| {
            let mut lookup: Vec<Option<usize>> = vec![None; target.num_corners()];
            for (k, o) in frame.obs.iter().enumerate() {
                lookup[o.corner] = Some(k);
            }
            let mut pool = Vec::new();
            let (mut used, mut failed, mut screened) = (0, 0, 0);
            for q in &quads {
                let idx: Option<Vec<usize>> = q.iter().map(|&c| lookup[c]).collect();
                let Some(idx) = idx else { continue };
                if opts.screen_outliers {
                    let gross = idx.iter().any(|&k| {
                        let ru = result.residuals[offsets[j] + 2 * k];
                        let rv = result.residuals[offsets[j] + 2 * k + 1];
                        (ru * ru + rv * rv).sqrt() > threshold
                    });
                    if gross && threshold > 0.0 {
                        screened += 1;
                        continue;
                    }
                }
                let corners: Vec<Observation> = idx.iter().map(|&k| frame.obs[k]).collect();
                match pose_only_refit(&result.camera, &target, &corners, &result.poses[j]) {
                    Ok((_, r)) => {
                        pool.extend_from_slice(r.as_slice());
                        used += 1;
                    }
                    Err(_) => failed += 1,
                }
            }
            (pool, used, failed, screened)
        })
        .collect();

    let mut pool = Vec::new();
    let (mut used, mut failed, mut screened) = (0, 0, 0);
    for (p, u, f, s) in per_frame {
        pool.extend(p);
        used += u;
        failed += f;
        screened += s;
    }
    if pool.is_empty() {
        return Err(Error::TooFewResiduals);
    }
    Ok(NoiseEstimate {
        sigma_d_sq: 4.0 * stats::robust_mse(&pool),
        n_virtual_targets: used,
        n_failed: failed,
        n_screened: screened,
        pool_size: pool.len(),
    })
}

/// Bias audit of one calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Estimated detector noise variance, px^2.
    pub sigma_d_sq_hat: f64,
    /// Robust accuracy estimate `robust_MSE / (1 - N_P/N)`, px^2.
    pub s_d_sq_hat: f64,
    /// Squared systematic error, px^2.
    pub bias_sq: f64,
    pub bias_ratio: f64,
    pub n_virtual_targets: usize,
    pub pool_size: usize,
}

impl BiasReport {
    pub fn sigma_d(&self) -> f64 {
        self.sigma_d_sq_hat.sqrt()
    }
    pub fn s_d(&self) -> f64 {
        self.s_d_sq_hat.sqrt()
    }
    pub fn bias(&self) -> f64 {
        self.bias_sq.sqrt()
    }
    pub fn sqrt_bias_ratio(&self) -> f64 {
        self.bias_ratio.sqrt()
    }

    pub fn to_json(&self) -> BiasReportJson {
        BiasReportJson {
            sigma_d_px: self.sigma_d(),
            s_d_px: self.s_d(),
            bias_px: self.bias(),
            bias_ratio: self.bias_ratio,
            sqrt_bias_ratio: self.sqrt_bias_ratio(),
            n_virtual_targets: self.n_virtual_targets,
        }
    }
}

/// External form of a [`BiasReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReportJson {
    pub sigma_d_px: f64,
    pub s_d_px: f64,
    pub bias_px: f64,
    pub bias_ratio: f64,
    pub sqrt_bias_ratio: f64,
    pub n_virtual_targets: usize,
}

/// Bias ratio from the calibration's robust MSE and a detector noise estimate.
pub fn bias_ratio(result: &CalibrationResult, noise: &NoiseEstimate) -> BiasReport {
    bias_ratio_from(result.robust_mse, result.dof_factor(), noise.sigma_d_sq, noise.n_virtual_targets, noise.pool_size)
}

/// `BR = eps^2 (1 - N_P/N) / robust_MSE` with `eps^2 = max(s_d^2 - sigma_d^2, 0)`.
pub fn bias_ratio_from(robust_mse: f64, dof_factor: f64, sigma_d_sq: f64, n_virtual_targets: usize, pool_size: usize) -> BiasReport {
    let s_d_sq = robust_mse / dof_factor;
    let bias_sq = (s_d_sq - sigma_d_sq).max(0.0);
    let br = if robust_mse > 0.0 { (bias_sq * dof_factor / robust_mse).clamp(0.0, 1.0) } else { 0.0 };
    BiasReport { sigma_d_sq_hat: sigma_d_sq, s_d_sq_hat: s_d_sq, bias_sq, bias_ratio: br, n_virtual_targets, pool_size }
}

/// Noise estimate followed by the bias ratio.
pub fn audit_bias(result: &CalibrationResult, dataset: &Dataset, opts: &NoiseOptions) -> Result<BiasReport> {
    let noise = estimate_detector_noise(result, dataset, opts)?;
    Ok(bias_ratio(result, &noise))
}

const KLD_BINS: usize = 8;
const KLD_MIN_SAMPLES: usize = 30;

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Discrete KL divergence `D(empirical || fitted Gaussian)` of residual
/// vectors: whitened by their sample mean and covariance, binned on an 8x8
/// grid over +-3 standard deviations, empirical bins Laplace-smoothed.
pub fn gaussian_kld(residuals: &[Vector2<f64>]) -> f64 {
    let n = residuals.len();
    let mean = residuals.iter().fold(Vector2::zeros(), |a, r| a + r) / n as f64;
    let mut cov = Matrix2::zeros();
    for r in residuals {
        let d = r - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;
    let Some(chol) = cov.cholesky() else { return f64::INFINITY };
    let linv = chol.l().try_inverse().expect("cholesky factor is invertible");

    let width = 6.0 / KLD_BINS as f64;
    let mut counts = [[0usize; KLD_BINS]; KLD_BINS];
    let mut inside = 0usize;
    for r in residuals {
        let z = linv * (r - mean);
        let bx = ((z.x + 3.0) / width).floor();
        let by = ((z.y + 3.0) / width).floor();
        if bx >= 0.0 && by >= 0.0 && (bx as usize) < KLD_BINS && (by as usize) < KLD_BINS {
            counts[bx as usize][by as usize] += 1;
            inside += 1;
        }
    }
    let edges: Vec<f64> = (0..=KLD_BINS).map(|i| phi(-3.0 + width * i as f64)).collect();
    let box_mass = (edges[KLD_BINS] - edges[0]).powi(2);
    let pseudo = 1.0 / (KLD_BINS * KLD_BINS) as f64;
    let total = inside as f64 + 1.0;
    let mut d = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let q = (edges[i + 1] - edges[i]) * (edges[j + 1] - edges[j]) / box_mass;
            let p = (c as f64 + pseudo) / total;
            d += p * (p / q).ln();
        }
    }
    d
}

/// Median over image-grid cells of [`gaussian_kld`]; cells holding fewer than
/// 30 residual vectors are skipped.
pub fn kld_bias_metric(result: &CalibrationResult, dataset: &Dataset, grid: (usize, usize)) -> Result<f64> {
    let ds = dataset.normalized();
    let obs: Vec<Observation> = ds.frames.iter().flat_map(|f| f.obs.iter().copied()).collect();
    if 2 * obs.len() != result.residuals.len() {
        return Err(Error::DimensionMismatch("dataset does not match calibration residuals".into()));
    }
    let (w, h) = match ds.image_size {
        Some([w, h]) => (w as f64, h as f64),
        None => (
            obs.iter().map(|o| o.u).fold(0.0, f64::max) + 1.0,
            obs.iter().map(|o| o.v).fold(0.0, f64::max) + 1.0,
        ),
    };
    let (nx, ny) = grid;
    let mut cells: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); nx * ny];
    for (k, o) in obs.iter().enumerate() {
        let cx = ((o.u / w * nx as f64).floor().max(0.0) as usize).min(nx - 1);
        let cy = ((o.v / h * ny as f64).floor().max(0.0) as usize).min(ny - 1);
        cells[cy * nx + cx].push(Vector2::new(result.residuals[2 * k], result.residuals[2 * k + 1]));
    }
    let klds: Vec<f64> = cells.iter().filter(|c| c.len() >= KLD_MIN_SAMPLES).map(|c| gaussian_kld(c)).collect();
    if klds.is_empty() {
        return Err(Error::TooFewResiduals);
    }
    Ok(stats::median(&klds))
}
