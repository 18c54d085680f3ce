//! Uncertainty audit: resampling covariances, the mapping error between two
//! camera models, the model matrix `H` of its quadratic approximation, the
//! expected mapping error (EME) and baseline metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{
    calibrate_layout, CalibrationProblem, CalibrationResult, CovarianceEstimate, CovarianceMethod, Dataset,
};
use crate::camera::{CameraModel, Pose, PreparedPose};
use crate::error::{Error, Result};
use crate::solver::{
    self, gauss_newton_step, BlockJacobian, GroupLayout, GroupedLeastSquares, GroupedProblem, Jacobian, LeastSquaresProblem, RowBlock, SolverError, SolverOptions,
};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    Full,
    Approximated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub mode: BootstrapMode,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_samples: 200, seed: 0, mode: BootstrapMode::Approximated }
    }
}

/// Fraction of failed replicates above which a resampling estimate is refused.
const MAX_FAILURE_RATE: f64 = 0.1;

/// Frame indices of each bootstrap sample: `n_frames` draws with replacement.
/// Sample `l` uses its own stream of the seeded generator.
pub fn bootstrap_draws(n_frames: usize, cfg: &BootstrapConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.n_samples < 2 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 2 samples, got {}", cfg.n_samples)));
    }
    if n_frames == 0 {
        return Err(Error::InvalidConfig("no frames to resample".into()));
    }
    Ok((0..cfg.n_samples)
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(l as u64);
            (0..n_frames).map(|_| rng.random_range(0..n_frames)).collect()
        })
        .collect())
}

fn collect_replicates(samples: Vec<Option<DVector<f64>>>, method: CovarianceMethod) -> Result<CovarianceEstimate> {
    let total = samples.len();
    let ok: Vec<DVector<f64>> = samples.into_iter().flatten().collect();
    let failed = total - ok.len();
    if failed as f64 > MAX_FAILURE_RATE * total as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures { failed, total });
    }
    Ok(CovarianceEstimate { sigma: stats::symmetrize(&stats::sample_covariance(&ok)), method, n_samples: Some(ok.len()) })
}

/// Full bootstrap: every sample is recalibrated from the full-data optimum.
pub fn bootstrap_covariance(dataset: &Dataset, result: &CalibrationResult, cfg: &BootstrapConfig) -> Result<CovarianceEstimate> {
    let draws = bootstrap_draws(dataset.num_frames(), cfg)?;
    bootstrap_covariance_with_draws(dataset, result, &draws, &SolverOptions::default())
}

/// Full bootstrap on given draws. Frames drawn several times share one pose.
pub fn bootstrap_covariance_with_draws(
    dataset: &Dataset,
    result: &CalibrationResult,
    draws: &[Vec<usize>],
    opts: &SolverOptions,
) -> Result<CovarianceEstimate> {
    if dataset.num_frames() < 5 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 5 frames, got {}", dataset.num_frames())));
    }
    if dataset.num_frames() != result.num_frames() {
        return Err(Error::DimensionMismatch("dataset does not match calibration".into()));
    }
    let ds = dataset.normalized();
    let problem = CalibrationProblem::new(&ds, result.camera.family(), result.planar);
    let theta = result.camera.theta();
    let samples: Vec<Option<DVector<f64>>> = draws
        .par_iter()
        .map(|draw| {
            let layout = GroupLayout::resampled(draw);
            let mut x0 = theta.to_vec();
            for &g in &layout.block_groups {
                x0.extend_from_slice(&result.poses[g].to_array());
            }
            match calibrate_layout(&problem, layout, &DVector::from_vec(x0), opts, false) {
                Ok((t, true)) => Some(t),
                _ => None,
            }
        })
        .collect();
    collect_replicates(samples, CovarianceMethod::Bootstrap)
}

/// Jacobian and residual rows of the drawn frames stacked in draw order.
/// Repeated frames share their pose block.
pub fn recompose(result: &CalibrationResult, draw: &[usize]) -> (BlockJacobian, DVector<f64>) {
    recompose_rows(&result.jacobian, &result.residuals, draw)
}

/// [`recompose`] for any grouped Jacobian with one row block per group.
pub fn recompose_rows(jacobian: &BlockJacobian, residuals: &DVector<f64>, draw: &[usize]) -> (BlockJacobian, DVector<f64>) {
    let layout = GroupLayout::resampled(draw);
    let offsets = jacobian.row_offsets();
    let mut rows = Vec::with_capacity(draw.len());
    let mut r = Vec::new();
    for (&g, &b) in draw.iter().zip(&layout.blocks) {
        let src = &jacobian.rows[g];
        rows.push(RowBlock { global: src.global.clone(), local: src.local.clone(), block: b });
        r.extend_from_slice(&residuals.as_slice()[offsets[g]..offsets[g + 1]]);
    }
    let bj = BlockJacobian { global_dim: jacobian.global_dim, local_dim: jacobian.local_dim, num_blocks: layout.num_blocks(), rows };
    (bj, DVector::from_vec(r))
}

/// Shared parameters re-estimated on one bootstrap draw of a grouped
/// problem, starting from the full-data optimum `x_hat`.
pub fn resampled_estimate<P: GroupedProblem + ?Sized>(
    problem: &P,
    x_hat: &DVector<f64>,
    draw: &[usize],
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let (ng, nl) = (problem.global_dim(), problem.local_dim());
    let layout = GroupLayout::resampled(draw);
    let mut x0 = x_hat.rows(0, ng).iter().copied().collect::<Vec<_>>();
    for &g in &layout.block_groups {
        x0.extend_from_slice(&x_hat.as_slice()[ng + nl * g..ng + nl * (g + 1)]);
    }
    let rep = solver::solve(&GroupedLeastSquares::with_layout(problem, layout), &DVector::from_vec(x0), opts)?;
    Ok(rep.params.rows(0, ng).into_owned())
}

/// One-step approximation of [`resampled_estimate`] from the full-data
/// Jacobian and residuals at `x_hat`.
pub fn approx_resampled_estimate(x_hat: &DVector<f64>, jacobian: &BlockJacobian, residuals: &DVector<f64>, draw: &[usize]) -> Result<DVector<f64>> {
    let (bj, r) = recompose_rows(jacobian, residuals, draw);
    let ng = bj.global_dim;
    let d = gauss_newton_step(&Jacobian::Block(bj), &r)?;
    Ok(x_hat.rows(0, ng) + d.rows(0, ng))
}

/// Approximated bootstrap: one undamped Gauss-Newton step from the full-data
/// optimum on each sample's recomposed Jacobian and residuals.
pub fn approx_bootstrap_covariance(result: &CalibrationResult, cfg: &BootstrapConfig) -> Result<CovarianceEstimate> {
    let draws = bootstrap_draws(result.num_frames(), cfg)?;
    approx_bootstrap_covariance_with_draws(result, &draws)
}

pub fn approx_bootstrap_covariance_with_draws(result: &CalibrationResult, draws: &[Vec<usize>]) -> Result<CovarianceEstimate> {
    let nt = result.camera.num_params();
    let theta = DVector::from_row_slice(result.camera.theta());
    let samples: Vec<Option<DVector<f64>>> = draws
        .par_iter()
        .map(|draw| {
            let (bj, r) = recompose(result, draw);
            gauss_newton_step(&Jacobian::Block(bj), &r).ok().map(|d| &theta + d.rows(0, nt))
        })
        .collect();
    collect_replicates(samples, CovarianceMethod::ApproxBootstrap)
}

/// Evaluation pixels for the mapping error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
}

impl Grid {
    /// 10 x 10 lattice over the sensor.
    pub fn default_for(width: f64, height: f64) -> Self {
        Self { nx: 10, ny: 10, width, height }
    }

    /// Cell centers of an `nx x ny` lattice (half-cell margins), row-major.
    pub fn points(&self) -> Vec<Vector2<f64>> {
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push(Vector2::new(
                    (i as f64 + 0.5) * self.width / self.nx as f64,
                    (j as f64 + 0.5) * self.height / self.ny as f64,
                ));
            }
        }
        out
    }
}

/// Whether a virtual rotation of the viewing rays may absorb part of the
/// difference between two models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    None,
    #[default]
    Rotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingError {
    /// Mean squared pixel distance per coordinate, `sum |d|^2 / (2 N_G)`, px^2.
    pub k: f64,
    /// Compensating rotation (axis-angle); zero without compensation.
    pub rotation: Vector3<f64>,
}

struct RotationFit<'a> {
    cam: &'a CameraModel,
    rays: &'a [Vector3<f64>],
    pixels: &'a [Vector2<f64>],
}

impl RotationFit<'_> {
    fn eval(&self, w: &DVector<f64>, jac: bool) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let rot = PreparedPose::new(&Pose::new(Vector3::new(w[0], w[1], w[2]), Vector3::zeros()));
        let n = self.rays.len();
        let mut r = DVector::zeros(2 * n);
        let mut j = DMatrix::zeros(if jac { 2 * n } else { 0 }, 3);
        for (i, (x, u)) in self.rays.iter().zip(self.pixels).enumerate() {
            let (xc, d_rot) = rot.transform_with_jacobian(x);
            let p = self.cam.project_with_jacobians(&xc).map_err(|e| SolverError::Evaluation(e.to_string()))?;
            r[2 * i] = p.pixel.x - u.x;
            r[2 * i + 1] = p.pixel.y - u.y;
            if jac {
                let d = p.d_point * d_rot;
                for k in 0..2 {
                    for c in 0..3 {
                        j[(2 * i + k, c)] = d[(k, c)];
                    }
                }
            }
        }
        Ok((r, j))
    }
}

impl LeastSquaresProblem for RotationFit<'_> {
    fn num_params(&self) -> usize {
        3
    }
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        Ok(self.eval(x, false)?.0)
    }
    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Jacobian), SolverError> {
        let (r, j) = self.eval(x, true)?;
        Ok((r, Jacobian::Dense(j)))
    }
}

/// Mean squared distance between the grid pixels and their images under
/// `cam_hat` of the viewing rays of `cam_bar`, optionally minimized over a
/// rotation of those rays.
pub fn mapping_error(cam_hat: &CameraModel, cam_bar: &CameraModel, grid: &[Vector2<f64>], compensation: Compensation) -> Result<MappingError> {
    let rays = grid.iter().map(|u| cam_bar.unproject(u).map(|r| r.direction)).collect::<std::result::Result<Vec<_>, _>>()?;
    let fit = RotationFit { cam: cam_hat, rays: &rays, pixels: grid };
    let norm = 1.0 / (2.0 * grid.len() as f64);
    match compensation {
        Compensation::None => {
            let r = fit.residuals(&DVector::zeros(3))?;
            Ok(MappingError { k: r.norm_squared() * norm, rotation: Vector3::zeros() })
        }
        Compensation::Rotation => {
            let rep = solver::solve(&fit, &DVector::zeros(3), &SolverOptions::default())?;
            Ok(MappingError { k: rep.residuals.norm_squared() * norm, rotation: Vector3::new(rep.params[0], rep.params[1], rep.params[2]) })
        }
    }
}

/// Quadratic-form matrix of the mapping error around `cam_hat`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMatrix {
    pub h: DMatrix<f64>,
    pub compensation: Compensation,
    pub n_grid: usize,
}

fn fd_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-8)
}

/// `H = J_res^T J_res / (2 N_G)` with `J_res` the derivative of the grid
/// reprojection differences with respect to the intrinsics, with the
/// rotation-compensable directions projected out when requested. Derivatives
/// are central finite differences.
pub fn model_matrix(cam_hat: &CameraModel, grid: &[Vector2<f64>], compensation: Compensation) -> Result<ModelMatrix> {
    let nt = cam_hat.num_params();
    let rows = 2 * grid.len();
    if rows < nt + 3 {
        return Err(Error::GridTooSmall { rows, params: nt });
    }
    let rays = grid.iter().map(|u| cam_hat.unproject(u).map(|r| r.direction)).collect::<std::result::Result<Vec<_>, _>>()?;
    let project_all = |cam: &CameraModel, w: &Vector3<f64>| -> Result<DVector<f64>> {
        let r = crate::camera::rodrigues(w);
        let mut out = DVector::zeros(rows);
        for (i, x) in rays.iter().enumerate() {
            let p = cam.project(&(r * x))?;
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        Ok(out)
    };
    let theta = cam_hat.theta();
    let mut j_theta = DMatrix::zeros(rows, nt);
    for c in 0..nt {
        let h = fd_step(theta[c]);
        let mut d = vec![0.0; nt];
        d[c] = h;
        let plus = project_all(&cam_hat.perturbed(&d)?, &Vector3::zeros())?;
        d[c] = -h;
        let minus = project_all(&cam_hat.perturbed(&d)?, &Vector3::zeros())?;
        j_theta.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    let j_res = match compensation {
        Compensation::None => j_theta,
        Compensation::Rotation => {
            let mut j_rot = DMatrix::zeros(rows, 3);
            for c in 0..3 {
                let h = fd_step(0.0);
                let mut w = Vector3::zeros();
                w[c] = h;
                let plus = project_all(cam_hat, &w)?;
                w[c] = -h;
                let minus = project_all(cam_hat, &w)?;
                j_rot.set_column(c, &((plus - minus) / (2.0 * h)));
            }
            let gram = j_rot.tr_mul(&j_rot);
            let coef = solver::solve_spd_multi(gram, &j_rot.tr_mul(&j_theta))?;
            &j_theta - &j_rot * coef
        }
    };
    let h = j_res.tr_mul(&j_res) / rows as f64;
    Ok(ModelMatrix { h: stats::symmetrize(&h), compensation, n_grid: grid.len() })
}

/// Expected mapping error and the spectrum behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmeReport {
    /// `trace(Sigma^1/2 H Sigma^1/2)`, px^2.
    pub eme: f64,
    /// Eigenvalues of `Sigma^1/2 H Sigma^1/2`, descending.
    pub eigenvalues: Vec<f64>,
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let min = SymmetricEigen::new(stats::symmetrize(m)).eigenvalues.min();
    let tr = m.trace().abs();
    if min < -1e-8 * tr.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(min));
    }
    Ok(())
}

/// `EME = trace(Sigma^1/2 H Sigma^1/2) = trace(Sigma H)`.
pub fn eme(sigma: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<EmeReport> {
    if sigma.shape() != h.shape() || !sigma.is_square() {
        return Err(Error::DimensionMismatch(format!("covariance is {:?}, model matrix {:?}", sigma.shape(), h.shape())));
    }
    check_psd(sigma)?;
    check_psd(h)?;
    let s = stats::sqrtm_psd(sigma);
    let m = stats::symmetrize(&(&s * h * &s));
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    Ok(EmeReport { eme: m.trace(), eigenvalues })
}

/// Samples of `K = sum lambda_n Q_n` with independent `Q_n ~ chi^2(1)`.
pub fn k_distribution(eigenvalues: &[f64], n_draws: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n_draws)
        .map(|_| {
            eigenvalues
                .iter()
                .map(|l| {
                    let z: f64 = StandardNormal.sample(rng);
                    l * z * z
                })
                .sum()
        })
        .collect()
}

/// Summary of a sampled distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub mean: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl DistributionSummary {
    pub fn of(samples: &[f64]) -> Self {
        Self {
            mean: stats::mean(samples),
            q05: stats::quantile(samples, 0.05),
            q25: stats::quantile(samples, 0.25),
            q50: stats::quantile(samples, 0.5),
            q75: stats::quantile(samples, 0.75),
            q95: stats::quantile(samples, 0.95),
        }
    }
}

/// Largest per-point scatter (RMS distance to the mean pixel) of a 5 x 5
/// lattice of 3D points reprojected with intrinsics drawn from
/// `N(theta_hat, Sigma)`. The points are the lattice pixels unprojected to
/// unit depth.
pub fn max_ere(cam_hat: &CameraModel, sigma: &DMatrix<f64>, width: f64, height: f64, n_mc: usize, rng: &mut impl Rng) -> Result<f64> {
    let nt = cam_hat.num_params();
    if sigma.shape() != (nt, nt) {
        return Err(Error::DimensionMismatch("covariance does not match the camera".into()));
    }
    check_psd(sigma)?;
    let lattice = Grid { nx: 5, ny: 5, width, height }.points();
    let points = lattice.iter().map(|u| cam_hat.unproject(u).map(|r| r.at_unit_depth())).collect::<std::result::Result<Vec<_>, _>>()?;
    let root = stats::sqrtm_psd(sigma);
    let theta = DVector::from_row_slice(cam_hat.theta());
    let mut draws: Vec<Vec<Vector2<f64>>> = Vec::with_capacity(n_mc);
    let mut rejected = 0;
    for _ in 0..n_mc {
        let z = DVector::from_fn(nt, |_, _| StandardNormal.sample(rng));
        let t = &theta + &root * z;
        let projected = cam_hat
            .with_theta(t.iter().copied().collect())
            .ok()
            .and_then(|c| points.iter().map(|x| c.project(x).ok()).collect::<Option<Vec<_>>>());
        match projected {
            Some(p) => draws.push(p),
            None => rejected += 1,
        }
    }
    if 2 * rejected > n_mc || draws.len() < 2 {
        return Err(Error::TooManyFailures { failed: rejected, total: n_mc });
    }
    let n = draws.len() as f64;
    let mut worst = 0.0f64;
    for k in 0..points.len() {
        let mean = draws.iter().fold(Vector2::zeros(), |a, d| a + d[k]) / n;
        let var = draws.iter().map(|d| (d[k] - mean).norm_squared()).sum::<f64>() / (n - 1.0);
        worst = worst.max(var.sqrt());
    }
    Ok(worst)
}

/// External form of an uncertainty audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub method: CovarianceMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    pub sigma_theta: Vec<Vec<f64>>,
    pub eme_px2: f64,
    pub sqrt_eme_px: f64,
    pub eigenvalues: Vec<f64>,
    pub trace_sigma: f64,
    pub max_ere_px: f64,
    pub grid: GridSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub nx: usize,
    pub ny: usize,
}

/// Covariance, EME and maxERE of one calibration.
pub fn uncertainty_report(
    result: &CalibrationResult,
    cov: &CovarianceEstimate,
    grid: &Grid,
    n_mc: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    let mm = model_matrix(&result.camera, &grid.points(), Compensation::Rotation)?;
    let e = eme(&cov.sigma, &mm.h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ere = max_ere(&result.camera, &cov.sigma, grid.width, grid.height, n_mc, &mut rng)?;
    Ok(UncertaintyReport {
        method: cov.method,
        n_samples: cov.n_samples,
        sigma_theta: cov.rows(),
        eme_px2: e.eme,
        sqrt_eme_px: e.eme.sqrt(),
        eigenvalues: e.eigenvalues,
        trace_sigma: cov.trace(),
        max_ere_px: ere,
        grid: GridSize { nx: grid.nx, ny: grid.ny },
    })
}

/// Image extent for grids: the dataset's sensor size, else twice the
/// principal point.
pub fn image_extent(dataset: &Dataset, cam: &CameraModel) -> (f64, f64) {
    match dataset.image_size {
        Some([w, h]) => (w as f64, h as f64),
        None => {
            let (cx, cy) = cam.principal_point();
            (2.0 * cx, 2.0 * cy)
        }
    }
}
