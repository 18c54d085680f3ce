//! Target-based calibration: joint optimization of intrinsics and per-frame
//! poses, residual statistics and the standard covariance estimate.

mod dataset;
mod init;

pub use dataset::{Dataset, Frame, Observation, TargetGeometry};
pub use init::{estimate_homography, initial_cameras, initialize, initialize_poses, mirrored_pose, pose_from_homography};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Family, Pose, PreparedPose};
use crate::error::{Error, Result};
use crate::solver::{
    self, BlockJacobian, GroupLayout, GroupLinearization, GroupedLeastSquares, GroupedProblem, Jacobian, LeastSquaresProblem,
    RobustKernel, SolveReport, SolverError, SolverOptions,
};
use crate::stats;

/// Per-frame observations prepared for fast evaluation.
#[derive(Clone, Debug)]
struct FrameData {
    points: Vec<Vector3<f64>>,
    pixels: Vec<Vector2<f64>>,
}

/// Bundle adjustment over one camera and one pose per frame. Residuals are
/// `observed - projected`, stacked frame by frame, corner by corner, `u`
/// before `v`.
#[derive(Clone, Debug)]
pub struct CalibrationProblem {
    family: Family,
    frames: Vec<FrameData>,
}

fn eval_err(e: crate::camera::CameraError) -> SolverError {
    SolverError::Evaluation(e.to_string())
}

impl CalibrationProblem {
    /// `dataset` should be normalized (observations sorted by corner id).
    pub fn new(dataset: &Dataset, family: Family, planar: bool) -> Self {
        let target = if planar { dataset.target.planar() } else { dataset.target.clone() };
        let frames = dataset
            .frames
            .iter()
            .map(|f| FrameData {
                points: f.obs.iter().map(|o| target.corner(o.corner)).collect(),
                pixels: f.obs.iter().map(|o| Vector2::new(o.u, o.v)).collect(),
            })
            .collect();
        Self { family, frames }
    }

    pub fn family(&self) -> Family {
        self.family
    }
}

impl GroupedProblem for CalibrationProblem {
    fn global_dim(&self) -> usize {
        self.family.num_params()
    }

    fn local_dim(&self) -> usize {
        6
    }

    fn num_groups(&self) -> usize {
        self.frames.len()
    }

    fn group_residuals(&self, group: usize, global: &[f64], local: &[f64]) -> Result<DVector<f64>, SolverError> {
        let cam = CameraModel::new(self.family, global.to_vec()).map_err(eval_err)?;
        let pose = PreparedPose::new(&Pose::from_slice(local));
        let f = &self.frames[group];
        let mut r = DVector::zeros(2 * f.points.len());
        for (i, (x, u)) in f.points.iter().zip(&f.pixels).enumerate() {
            let p = cam.project(&pose.transform(x)).map_err(eval_err)?;
            r[2 * i] = u.x - p.x;
            r[2 * i + 1] = u.y - p.y;
        }
        Ok(r)
    }

    fn group_linearize(&self, group: usize, global: &[f64], local: &[f64]) -> Result<GroupLinearization, SolverError> {
        let cam = CameraModel::new(self.family, global.to_vec()).map_err(eval_err)?;
        let pose = PreparedPose::new(&Pose::from_slice(local));
        let f = &self.frames[group];
        let n = f.points.len();
        let nt = self.family.num_params();
        let mut r = DVector::zeros(2 * n);
        let mut jg = DMatrix::zeros(2 * n, nt);
        let mut jl = DMatrix::zeros(2 * n, 6);
        for (i, (x, u)) in f.points.iter().zip(&f.pixels).enumerate() {
            let (xc, d_rot) = pose.transform_with_jacobian(x);
            let p = cam.project_with_jacobians(&xc).map_err(eval_err)?;
            r[2 * i] = u.x - p.pixel.x;
            r[2 * i + 1] = u.y - p.pixel.y;
            let d_omega = p.d_point * d_rot;
            for k in 0..2 {
                let row = 2 * i + k;
                for c in 0..nt {
                    jg[(row, c)] = -p.d_theta[(k, c)];
                }
                for c in 0..3 {
                    jl[(row, c)] = -d_omega[(k, c)];
                    jl[(row, 3 + c)] = -p.d_point[(k, c)];
                }
            }
        }
        Ok(GroupLinearization { residuals: r, global: jg, local: jl })
    }
}

/// Starting point of the optimization.
#[derive(Clone, Debug, Default)]
pub enum Initialization {
    /// Closed-form estimate from plane homographies.
    #[default]
    Zhang,
    /// Known intrinsics; poses from homographies in normalized coordinates.
    Camera(CameraModel),
    /// Complete starting point.
    Full { camera: CameraModel, poses: Vec<Pose> },
}

#[derive(Clone, Debug)]
pub struct CalibrationOptions {
    pub solver: SolverOptions,
    /// Re-solve with a Cauchy kernel of scale `2 sigma`, `sigma` from the MAD
    /// of the plain solution's residuals.
    pub robust: bool,
    pub init: Initialization,
    /// Treat the target as planar even if it carries z offsets.
    pub planar: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { solver: SolverOptions::default(), robust: false, init: Initialization::Zhang, planar: false }
    }
}

/// Outcome of a calibration.
#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub camera: CameraModel,
    pub poses: Vec<Pose>,
    pub frame_ids: Vec<i64>,
    /// Stacked `observed - projected` residuals.
    pub residuals: DVector<f64>,
    /// Jacobian of the residuals with respect to `[theta, pose_0, pose_1, ...]`.
    pub jacobian: BlockJacobian,
    pub mse: f64,
    pub rmse: f64,
    /// `(1.4826 * MAD)^2` of the residual components.
    pub robust_mse: f64,
    /// Number of scalar residuals.
    pub n: usize,
    /// Number of estimated parameters, intrinsics plus six per frame.
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the target was treated as planar.
    pub planar: bool,
}

impl CalibrationResult {
    /// `1 - N_P / N`.
    pub fn dof_factor(&self) -> f64 {
        1.0 - self.n_params as f64 / self.n as f64
    }

    /// Accuracy estimate `MSE / (1 - N_P/N)`.
    pub fn s_d_sq(&self) -> f64 {
        self.mse / self.dof_factor()
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    /// Full parameter vector `[theta, pose_0, ...]`.
    pub fn params(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.camera.theta().to_vec();
        for p in &self.poses {
            v.extend_from_slice(&p.to_array());
        }
        DVector::from_vec(v)
    }

    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            camera: self.camera.clone(),
            param_names: self.camera.family().param_names().iter().map(|s| s.to_string()).collect(),
            poses: self.poses.clone(),
            frame_ids: self.frame_ids.clone(),
            residuals: self.residuals.as_slice().to_vec(),
            mse_px2: self.mse,
            rmse_px: self.rmse,
            robust_mse_px2: self.robust_mse,
            n: self.n,
            n_params: self.n_params,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// JSON form of a [`CalibrationResult`] without the Jacobian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub camera: CameraModel,
    pub param_names: Vec<String>,
    pub poses: Vec<Pose>,
    pub frame_ids: Vec<i64>,
    pub residuals: Vec<f64>,
    pub mse_px2: f64,
    pub rmse_px: f64,
    pub robust_mse_px2: f64,
    pub n: usize,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn stack_params(camera: &CameraModel, poses: &[Pose]) -> DVector<f64> {
    let mut v = camera.theta().to_vec();
    for p in poses {
        v.extend_from_slice(&p.to_array());
    }
    DVector::from_vec(v)
}

/// Runs the solver, optionally followed by a Cauchy-robustified pass.
pub(crate) fn solve_maybe_robust<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    opts: &SolverOptions,
    robust: bool,
) -> Result<SolveReport> {
    let plain = solver::solve(problem, x0, opts)?;
    if !robust {
        return Ok(plain);
    }
    let sigma = stats::MAD_TO_SIGMA * stats::mad_about_zero(plain.residuals.as_slice());
    if !(sigma > 0.0) {
        return Ok(plain);
    }
    let ropts = SolverOptions { kernel: RobustKernel::Cauchy { scale: 2.0 * sigma }, ..opts.clone() };
    Ok(solver::solve(problem, &plain.params, &ropts)?)
}

/// Jointly optimizes intrinsics of `family` and all frame poses.
pub fn calibrate(dataset: &Dataset, family: Family, opts: &CalibrationOptions) -> Result<CalibrationResult> {
    dataset.validate()?;
    let ds = dataset.normalized();
    let n = ds.num_residuals();
    let n_params = family.num_params() + 6 * ds.num_frames();
    if n <= n_params {
        return Err(Error::InsufficientObservations { n, n_params });
    }
    let report = match &opts.init {
        Initialization::Full { camera, poses } => {
            if poses.len() != ds.num_frames() {
                return Err(Error::InvalidConfig(format!("{} initial poses for {} frames", poses.len(), ds.num_frames())));
            }
            let c = if camera.family() == family { camera.clone() } else { camera.convert(family)? };
            let problem = CalibrationProblem::new(&ds, family, opts.planar);
            solve_maybe_robust(&GroupedLeastSquares::new(&problem), &stack_params(&c, poses), &opts.solver, opts.robust)?
        }
        Initialization::Zhang => solve_staged(&ds, family, opts, initial_cameras(&ds, family)?)?,
        Initialization::Camera(c) => {
            let c = if c.family() == family { c.clone() } else { c.convert(family)? };
            solve_staged(&ds, family, opts, vec![c])?
        }
    };
    let frame_ids = ds.frames.iter().map(|f| f.id).collect();
    build_result(family, report, frame_ids, opts.planar)
}

/// Best of several starting cameras, poses from homographies. The winner is
/// restarted once with poses re-derived from the solved camera, whose
/// distortion makes the homographies accurate.
fn solve_from_cameras(ds: &Dataset, family: Family, opts: &CalibrationOptions, cameras: Vec<CameraModel>) -> Result<SolveReport> {
    let problem = CalibrationProblem::new(ds, family, opts.planar);
    let gls = GroupedLeastSquares::new(&problem);
    let solve = |c: &CameraModel| initialize_poses(ds, c).and_then(|p| solve_maybe_robust(&gls, &stack_params(c, &p), &opts.solver, opts.robust));
    let mut best: Option<SolveReport> = None;
    let mut first_err = None;
    for c in &cameras {
        match solve(c) {
            Ok(rep) if best.as_ref().is_none_or(|b| rep.cost < b.cost) => best = Some(rep),
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some(mut best) = best else {
        return Err(first_err.unwrap_or_else(|| Error::InvalidConfig("no starting camera".into())));
    };
    let nt = family.num_params();
    let refined = CameraModel::new(family, best.params.rows(0, nt).iter().copied().collect())?;
    if let Ok(rep) = solve(&refined) {
        if rep.cost < best.cost {
            best = rep;
        }
    }
    Ok(best)
}

/// Frames showing few corners get poor initial poses (planar pose ambiguity,
/// uncorrected distortion near the image border) and can trap the joint
/// solve. When such frames exist, the intrinsics are also estimated from the
/// well-covered frames alone and used as an extra start; the lowest cost wins.
fn solve_staged(ds: &Dataset, family: Family, opts: &CalibrationOptions, mut cameras: Vec<CameraModel>) -> Result<SolveReport> {
    // higher-order radial models also start from the one-term solution,
    // which keeps the extra coefficients from wandering off early
    if let Family::PinholeRadial(k) = family {
        if k > 1 {
            let one = Family::PinholeRadial(1);
            let start: Vec<CameraModel> = cameras.iter().map(|c| c.convert(one)).collect::<std::result::Result<_, _>>()?;
            if let Ok(rep) = solve_staged(ds, one, opts, start) {
                cameras.push(CameraModel::new(one, rep.params.rows(0, one.num_params()).iter().copied().collect())?.convert(family)?);
            }
        }
    }
    let min_corners = (ds.target.num_corners() / 4).max(8);
    let core: Vec<Frame> = ds.frames.iter().filter(|f| f.obs.len() >= min_corners).cloned().collect();
    let direct = solve_from_cameras(ds, family, opts, cameras.clone());
    if core.len() == ds.num_frames() || core.len() < 3 {
        return direct;
    }
    let core_ds = Dataset { target: ds.target.clone(), frames: core, image_size: ds.image_size };
    let staged = solve_from_cameras(&core_ds, family, opts, cameras).and_then(|rep| {
        let nt = family.num_params();
        let cam = CameraModel::new(family, rep.params.rows(0, nt).iter().copied().collect())?;
        solve_from_cameras(ds, family, opts, vec![cam])
    });
    match (direct, staged) {
        (Ok(a), Ok(b)) => Ok(if b.cost < a.cost { b } else { a }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(b)) => Ok(b),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Calibration on a resampled frame layout, started from a given point.
/// Used by the bootstrap; returns the intrinsics only.
pub(crate) fn calibrate_layout(
    problem: &CalibrationProblem,
    layout: GroupLayout,
    x0: &DVector<f64>,
    opts: &SolverOptions,
    robust: bool,
) -> Result<(DVector<f64>, bool)> {
    let nt = problem.global_dim();
    let gls = GroupedLeastSquares::with_layout(problem, layout);
    let rep = solve_maybe_robust(&gls, x0, opts, robust)?;
    Ok((rep.params.rows(0, nt).into_owned(), rep.converged))
}

fn build_result(family: Family, report: SolveReport, frame_ids: Vec<i64>, planar: bool) -> Result<CalibrationResult> {
    let nt = family.num_params();
    let camera = CameraModel::new(family, report.params.rows(0, nt).iter().copied().collect())?;
    let nf = (report.params.len() - nt) / 6;
    let poses = (0..nf).map(|j| Pose::from_slice(&report.params.as_slice()[nt + 6 * j..nt + 6 * j + 6])).collect();
    let jacobian = match report.jacobian {
        Jacobian::Block(b) => b,
        Jacobian::Dense(_) => unreachable!("grouped problems produce block Jacobians"),
    };
    let r = report.residuals;
    let n = r.len();
    let mse = r.norm_squared() / n as f64;
    Ok(CalibrationResult {
        camera,
        poses,
        frame_ids,
        robust_mse: stats::robust_mse(r.as_slice()),
        residuals: r,
        jacobian,
        mse,
        rmse: mse.sqrt(),
        n,
        n_params: nt + 6 * nf,
        iterations: report.iterations,
        converged: report.converged,
        planar,
    })
}

/// Recomputes the stacked residuals of `dataset` for given parameters.
pub fn residuals_at(dataset: &Dataset, camera: &CameraModel, poses: &[Pose], planar: bool) -> Result<DVector<f64>> {
    let ds = dataset.normalized();
    let problem = CalibrationProblem::new(&ds, camera.family(), planar);
    let gls = GroupedLeastSquares::new(&problem);
    Ok(gls.residuals(&stack_params(camera, poses))?)
}

/// How a covariance estimate was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceMethod {
    #[serde(rename = "std")]
    Std,
    #[serde(rename = "bs")]
    Bootstrap,
    #[serde(rename = "abs")]
    ApproxBootstrap,
}

impl CovarianceMethod {
    pub fn tag(self) -> &'static str {
        match self {
            CovarianceMethod::Std => "std",
            CovarianceMethod::Bootstrap => "bs",
            CovarianceMethod::ApproxBootstrap => "abs",
        }
    }
}

impl std::str::FromStr for CovarianceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(CovarianceMethod::Std),
            "bs" => Ok(CovarianceMethod::Bootstrap),
            "abs" => Ok(CovarianceMethod::ApproxBootstrap),
            other => Err(Error::InvalidConfig(format!("unknown covariance method `{other}`"))),
        }
    }
}

/// Covariance of the intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub method: CovarianceMethod,
    /// Number of resampling replicates that entered the estimate.
    pub n_samples: Option<usize>,
}

impl CovarianceEstimate {
    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.sigma.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Information matrix of the intrinsics with the poses marginalized out:
/// the Schur complement of the pose blocks in `J^T J`.
pub fn intrinsics_information(jacobian: &BlockJacobian) -> Result<DMatrix<f64>> {
    let ne = jacobian.normal_equations(&DVector::zeros(jacobian.nrows()));
    Ok(ne.schur_complement()?)
}

/// `s_d^2 (J^T J)^-1` restricted to the intrinsics, with
/// `s_d^2 = MSE / (1 - N_P/N)`.
pub fn standard_covariance(result: &CalibrationResult) -> Result<CovarianceEstimate> {
    let ne = result.jacobian.normal_equations(&DVector::zeros(result.n));
    let inv = ne.global_marginal_inverse()?;
    Ok(CovarianceEstimate { sigma: inv * result.s_d_sq(), method: CovarianceMethod::Std, n_samples: None })
}

struct PoseProblem<'a> {
    camera: &'a CameraModel,
    points: Vec<Vector3<f64>>,
    pixels: Vec<Vector2<f64>>,
}

impl PoseProblem<'_> {
    fn eval(&self, x: &DVector<f64>, jac: bool) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
        let pose = PreparedPose::new(&Pose::from_slice(x.as_slice()));
        let n = self.points.len();
        let mut r = DVector::zeros(2 * n);
        let mut j = DMatrix::zeros(if jac { 2 * n } else { 0 }, 6);
        for (i, (x, u)) in self.points.iter().zip(&self.pixels).enumerate() {
            if jac {
                let (xc, d_rot) = pose.transform_with_jacobian(x);
                let p = self.camera.project_with_jacobians(&xc).map_err(eval_err)?;
                r[2 * i] = u.x - p.pixel.x;
                r[2 * i + 1] = u.y - p.pixel.y;
                let d_omega = p.d_point * d_rot;
                for k in 0..2 {
                    for c in 0..3 {
                        j[(2 * i + k, c)] = -d_omega[(k, c)];
                        j[(2 * i + k, 3 + c)] = -p.d_point[(k, c)];
                    }
                }
            } else {
                let p = self.camera.project(&pose.transform(x)).map_err(eval_err)?;
                r[2 * i] = u.x - p.x;
                r[2 * i + 1] = u.y - p.y;
            }
        }
        Ok((r, j))
    }
}

impl LeastSquaresProblem for PoseProblem<'_> {
    fn num_params(&self) -> usize {
        6
    }
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        Ok(self.eval(x, false)?.0)
    }
    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Jacobian), SolverError> {
        let (r, j) = self.eval(x, true)?;
        Ok((r, Jacobian::Dense(j)))
    }
}

/// Re-estimates one pose from a subset of a frame's corners with the
/// intrinsics held fixed. Returns the pose and the refit residuals.
pub fn pose_only_refit(
    camera: &CameraModel,
    target: &TargetGeometry,
    corners: &[Observation],
    pose0: &Pose,
) -> Result<(Pose, DVector<f64>)> {
    if corners.len() < 4 {
        return Err(Error::TooFewCorners(corners.len()));
    }
    let problem = PoseProblem {
        camera,
        points: corners.iter().map(|o| target.corner(o.corner)).collect(),
        pixels: corners.iter().map(|o| Vector2::new(o.u, o.v)).collect(),
    };
    let x0 = DVector::from_row_slice(&pose0.to_array());
    let rep = solver::solve(&problem, &x0, &SolverOptions::default())?;
    Ok((Pose::from_slice(rep.params.as_slice()), rep.residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn truth() -> CameraModel {
        CameraModel::new(Family::PinholeRadial(2), vec![800.0, 805.0, 640.0, 480.0, -0.2, 0.05]).unwrap()
    }

    fn dataset(cam: &CameraModel, n_frames: usize) -> (Dataset, Vec<Pose>) {
        let target = TargetGeometry::new(6, 8, 0.04);
        let c = target.center();
        let mut poses = Vec::new();
        let mut frames = Vec::new();
        for j in 0..n_frames {
            let a = j as f64;
            let rot = Vector3::new(0.3 * (a * 1.3).sin(), 0.35 * (a * 0.7).cos(), 0.2 * (a * 0.9).sin());
            let r = crate::camera::rodrigues(&rot);
            let t = Vector3::new(0.1 * (a * 2.1).sin(), 0.08 * (a * 1.7).cos(), 0.6 + 0.05 * a) - r * c;
            let pose = Pose::new(rot, t);
            let obs = (0..target.num_corners())
                .map(|k| {
                    let u = cam.project(&pose.transform(&target.corner(k))).unwrap();
                    Observation { corner: k, u: u.x, v: u.y }
                })
                .collect();
            frames.push(Frame { id: j as i64, obs });
            poses.push(pose);
        }
        (Dataset { target, frames, image_size: Some([1280, 960]) }, poses)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = truth();
        let (ds, poses) = dataset(&cam, 2);
        let p = CalibrationProblem::new(&ds, Family::PinholeRadial(2), false);
        let th = cam.theta().to_vec();
        let pose = poses[1].to_array();
        let lin = p.group_linearize(1, &th, &pose).unwrap();
        for c in 0..6 {
            let h = 1e-6 * th[c].abs().max(1e-3);
            let mut tp = th.clone();
            let mut tm = th.clone();
            tp[c] += h;
            tm[c] -= h;
            let fd = (p.group_residuals(1, &tp, &pose).unwrap() - p.group_residuals(1, &tm, &pose).unwrap()) / (2.0 * h);
            assert_relative_eq!(lin.global.column(c).into_owned(), fd, epsilon = 1e-5, max_relative = 1e-5);
        }
        for c in 0..6 {
            let h = 1e-7;
            let mut pp = pose;
            let mut pm = pose;
            pp[c] += h;
            pm[c] -= h;
            let fd = (p.group_residuals(1, &th, &pp).unwrap() - p.group_residuals(1, &th, &pm).unwrap()) / (2.0 * h);
            assert_relative_eq!(lin.local.column(c).into_owned(), fd, epsilon = 1e-3, max_relative = 1e-5);
        }
    }

    #[test]
    fn noise_free_recovers_truth() {
        let cam = truth();
        let (ds, _) = dataset(&cam, 8);
        let res = calibrate(&ds, Family::PinholeRadial(2), &CalibrationOptions::default()).unwrap();
        for (a, b) in res.camera.theta().iter().zip(cam.theta()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6, epsilon = 1e-9);
        }
        assert!(res.rmse < 1e-7);
        assert!(res.converged);
        assert_eq!(res.n_params, 6 + 6 * 8);
    }

    #[test]
    fn residual_order_is_reproducible() {
        let cam = truth();
        let (mut ds, _) = dataset(&cam, 5);
        ds.frames[2].obs[3].u += 0.3;
        let res = calibrate(&ds, Family::PinholeRadial(2), &CalibrationOptions::default()).unwrap();
        let r = residuals_at(&ds, &res.camera, &res.poses, false).unwrap();
        assert_eq!(r, res.residuals);
    }

    #[test]
    fn dof_corrected_accuracy() {
        // MSE = 0.0025 px^2 with N_P/N = 0.2 gives 0.003125 px^2
        let cam = truth();
        let (ds, _) = dataset(&cam, 3);
        let mut res = calibrate(&ds, Family::PinholeRadial(2), &CalibrationOptions::default()).unwrap();
        res.mse = 0.0025;
        res.n = 120;
        res.n_params = 24;
        assert_relative_eq!(res.s_d_sq(), 0.003125, epsilon = 1e-15);
    }

    #[test]
    fn too_few_observations() {
        let cam = truth();
        let (mut ds, _) = dataset(&cam, 3);
        for f in &mut ds.frames {
            f.obs.truncate(4);
        }
        assert!(matches!(
            calibrate(&ds, Family::PinholeRadial(2), &CalibrationOptions::default()),
            Err(Error::InsufficientObservations { .. })
        ));
    }

    #[test]
    fn refit_needs_four_corners() {
        let cam = truth();
        let (ds, poses) = dataset(&cam, 1);
        let err = pose_only_refit(&cam, &ds.target, &ds.frames[0].obs[..3], &poses[0]).unwrap_err();
        assert_eq!(err, Error::TooFewCorners(3));
    }

    #[test]
    fn refit_noise_free_is_exact() {
        let cam = truth();
        let (ds, poses) = dataset(&cam, 1);
        let start = Pose::new(poses[0].rotation * 1.01, poses[0].translation * 1.01);
        let (pose, r) = pose_only_refit(&cam, &ds.target, &ds.frames[0].obs[..4], &start).unwrap();
        assert!(r.amax() < 1e-9);
        assert_relative_eq!(pose.translation, poses[0].translation, epsilon = 1e-6);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let cam = truth();
        let (mut ds, _) = dataset(&cam, 6);
        for (i, f) in ds.frames.iter_mut().enumerate() {
            for (k, o) in f.obs.iter_mut().enumerate() {
                o.u += 0.05 * ((i * 31 + k * 7) as f64).sin();
                o.v += 0.05 * ((i * 17 + k * 13) as f64).cos();
            }
        }
        let res = calibrate(&ds, Family::PinholeRadial(2), &CalibrationOptions::default()).unwrap();
        let cov = standard_covariance(&res).unwrap();
        assert!(stats::is_psd(&cov.sigma, 1e-10));
        let dense = res.jacobian.to_dense();
        let full = (dense.transpose() * &dense).try_inverse().unwrap() * res.s_d_sq();
        assert_relative_eq!(cov.sigma, full.view((0, 0), (6, 6)).into_owned(), max_relative = 1e-6, epsilon = 1e-12);
    }
}
