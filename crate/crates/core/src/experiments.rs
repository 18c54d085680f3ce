//! Experiment runners on simulated data: model-complexity ladder,
//! uncertainty benchmark, noise-only Monte Carlo and next-pose guidance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{audit_bias, NoiseOptions};
use crate::calib::{
    calibrate, intrinsics_information, standard_covariance, CalibrationOptions, CalibrationProblem, CalibrationResult, Dataset,
    Frame, Initialization, Observation,
};
use crate::camera::{CameraModel, Family, Pose};
use crate::error::{Error, Result};
use crate::sim::{self, resimulate_noise, sample_visible_pose, simulate_with_poses, Scenario, SimConfig};
use crate::solver::{solve_spd_multi, GroupedProblem};
use crate::stats;
use crate::uncertainty::{
    approx_bootstrap_covariance_with_draws, bootstrap_covariance_with_draws, bootstrap_draws, eme, mapping_error, model_matrix,
    BootstrapConfig, BootstrapMode, Compensation, Grid,
};

/// Seed of repetition `rep` at `n_frames` frames derived from a base seed
/// (SplitMix64 finalizer over the packed inputs).
pub fn derive_seed(base: u64, n_frames: usize, rep: usize) -> u64 {
    let mut z = base ^ ((n_frames as u64) << 40) ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the model ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub family: String,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_rmse_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_d_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Calibrates with each family and audits the bias. Failures are recorded
/// in the row and the ladder continues.
pub fn model_ladder(dataset: &Dataset, families: &[Family], opts: &CalibrationOptions) -> Vec<LadderRow> {
    families
        .iter()
        .map(|&f| {
            let out = calibrate(dataset, f, opts).and_then(|r| audit_bias(&r, dataset, &NoiseOptions::default()).map(|b| (r, b)));
            match out {
                Ok((r, b)) => LadderRow {
                    family: f.name().into(),
                    label: f.label(),
                    robust_rmse_px: Some(r.robust_mse.sqrt()),
                    bias_ratio: Some(b.bias_ratio),
                    bias_px: Some(b.bias()),
                    sigma_d_px: Some(b.sigma_d()),
                    error: None,
                },
                Err(e) => LadderRow {
                    family: f.name().into(),
                    label: f.label(),
                    robust_rmse_px: None,
                    bias_ratio: None,
                    bias_px: None,
                    sigma_d_px: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenario: Scenario,
    pub n_reps: usize,
    pub n_frames: Vec<usize>,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Run the full bootstrap (costly) in addition to the approximated one.
    pub full_bootstrap: bool,
    pub approx_bootstrap: bool,
    pub grid: (usize, usize),
}

impl BenchmarkConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n_reps: 50,
            n_frames: (10..=50).step_by(5).collect(),
            n_bootstrap: 200,
            seed: 0,
            full_bootstrap: false,
            approx_bootstrap: true,
            grid: (10, 10),
        }
    }
}

/// Outcome of one benchmark repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub n_frames: usize,
    pub rep: usize,
    /// Simulation and bootstrap seed of this repetition.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eme_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eme_bs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eme_abs: Option<f64>,
    /// Mapping error of the estimate against the reference model: the
    /// simulation truth, or the reference calibration when the fitted family
    /// cannot represent the truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_k: Option<f64>,
    /// Mapping error against the simulation truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean of a metric over repetitions with a 95% bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_frames: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub scenario: Scenario,
    pub model: String,
    pub config: BenchmarkConfig,
    /// Intrinsics of the reference calibration, when one replaced the truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
    pub records: Vec<RepRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl BenchmarkRun {
    /// Aggregate of `metric` at `n_frames`, if any repetition produced it.
    pub fn aggregate(&self, n_frames: usize, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.n_frames == n_frames && a.metric == metric)
    }
}

/// Reference calibration of `family` in a scenario: the mean intrinsics of
/// `n_calibrations` calibrations with `n_frames` random frames each. Stands
/// in for the truth when the truth lies outside the fitted family.
pub fn reference_calibration(scenario: Scenario, family: Family, seed: u64, n_calibrations: usize, n_frames: usize) -> Result<CameraModel> {
    let thetas: Vec<Vec<f64>> = (0..n_calibrations)
        .into_par_iter()
        .map(|i| {
            let ds = scenario_dataset(scenario, n_frames, derive_seed(!seed, n_frames, i))?;
            let opts = CalibrationOptions { planar: scenario == Scenario::Nonplanar, ..Default::default() };
            Ok(calibrate(&ds, family, &opts)?.camera.theta().to_vec())
        })
        .collect::<Result<_>>()?;
    let n = thetas.len().max(1) as f64;
    let mean = (0..family.num_params()).map(|k| thetas.iter().map(|t| t[k]).sum::<f64>() / n).collect();
    Ok(CameraModel::new(family, mean)?)
}

fn run_rep(cfg: &BenchmarkConfig, reference: Option<&CameraModel>, n_frames: usize, rep: usize) -> RepRecord {
    let seed = derive_seed(cfg.seed, n_frames, rep);
    let mut rec = RepRecord {
        n_frames,
        rep,
        seed,
        theta: None,
        bias_ratio: None,
        eme_std: None,
        eme_bs: None,
        eme_abs: None,
        true_k: None,
        k_truth: None,
        error: None,
    };
    if let Err(e) = fill_rep(cfg, reference, n_frames, seed, &mut rec) {
        rec.error = Some(e.to_string());
    }
    rec
}

fn fill_rep(cfg: &BenchmarkConfig, reference: Option<&CameraModel>, n_frames: usize, seed: u64, rec: &mut RepRecord) -> Result<()> {
    let sim_cfg = cfg.scenario.config(n_frames, seed);
    let (ds, _) = simulate_with_poses(&sim_cfg)?;
    let opts = CalibrationOptions { planar: cfg.scenario == Scenario::Nonplanar, ..Default::default() };
    let res = calibrate(&ds, cfg.scenario.model(), &opts)?;
    rec.theta = Some(res.camera.theta().to_vec());
    rec.bias_ratio = audit_bias(&res, &ds, &NoiseOptions::default()).ok().map(|b| b.bias_ratio);
    let grid = Grid { nx: cfg.grid.0, ny: cfg.grid.1, width: sim_cfg.image_size[0] as f64, height: sim_cfg.image_size[1] as f64 };
    let pts = grid.points();
    rec.k_truth = Some(mapping_error(&res.camera, &sim_cfg.truth, &pts, Compensation::Rotation)?.k);
    rec.true_k = match reference {
        Some(r) => Some(mapping_error(&res.camera, r, &pts, Compensation::Rotation)?.k),
        None => rec.k_truth,
    };
    let h = model_matrix(&res.camera, &pts, Compensation::Rotation)?.h;
    rec.eme_std = Some(eme(&standard_covariance(&res)?.sigma, &h)?.eme);
    if cfg.full_bootstrap || cfg.approx_bootstrap {
        let draws = bootstrap_draws(n_frames, &BootstrapConfig { n_samples: cfg.n_bootstrap, seed, mode: BootstrapMode::Full })?;
        if cfg.approx_bootstrap {
            rec.eme_abs = Some(eme(&approx_bootstrap_covariance_with_draws(&res, &draws)?.sigma, &h)?.eme);
        }
        if cfg.full_bootstrap {
            rec.eme_bs = Some(eme(&bootstrap_covariance_with_draws(&ds, &res, &draws, &Default::default())?.sigma, &h)?.eme);
        }
    }
    Ok(())
}

const REFERENCE_CALIBRATIONS: usize = 10;
const REFERENCE_FRAMES: usize = 50;

/// Metric names reported by [`uncertainty_benchmark`].
pub const METRICS: [&str; 6] = ["true_k", "k_truth", "eme_std", "eme_bs", "eme_abs", "bias_ratio"];

fn metric(rec: &RepRecord, name: &str) -> Option<f64> {
    match name {
        "true_k" => rec.true_k,
        "k_truth" => rec.k_truth,
        "eme_std" => rec.eme_std,
        "eme_bs" => rec.eme_bs,
        "eme_abs" => rec.eme_abs,
        "bias_ratio" => rec.bias_ratio,
        _ => None,
    }
}

/// Repeated simulate-calibrate-audit runs for every frame count, with the
/// true mapping error against the simulation truth.
pub fn uncertainty_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    if cfg.n_reps == 0 || cfg.n_frames.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs repetitions and frame counts".into()));
    }
    let jobs: Vec<(usize, usize)> = cfg.n_frames.iter().flat_map(|&nf| (0..cfg.n_reps).map(move |r| (nf, r))).collect();
    let reference = if cfg.scenario.model_contains_truth() {
        None
    } else {
        Some(reference_calibration(cfg.scenario, cfg.scenario.model(), cfg.seed, REFERENCE_CALIBRATIONS, REFERENCE_FRAMES)?)
    };
    let records: Vec<RepRecord> = jobs.par_iter().map(|&(nf, r)| run_rep(cfg, reference.as_ref(), nf, r)).collect();
    let mut aggregates = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &nf in &cfg.n_frames {
        for name in METRICS {
            let vals: Vec<f64> = records.iter().filter(|r| r.n_frames == nf).filter_map(|r| metric(r, name)).collect();
            if vals.is_empty() {
                continue;
            }
            let (lo, hi) = stats::bootstrap_mean_ci(&vals, 0.95, 1000, &mut rng);
            aggregates.push(Aggregate { n_frames: nf, metric: name.into(), n: vals.len(), mean: stats::mean(&vals), ci_low: lo, ci_high: hi });
        }
    }
    Ok(BenchmarkRun {
        scenario: cfg.scenario,
        model: cfg.scenario.model().label(),
        config: cfg.clone(),
        reference: reference.map(|r| r.theta().to_vec()),
        records,
        aggregates,
    })
}

/// Noise-only Monte Carlo at fixed poses: the true mapping error of
/// `n_realizations` calibrations, plus the EME spectrum of the first one.
pub struct NoiseStudy {
    pub true_k: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub eme: f64,
}

pub fn noise_study(cfg: &SimConfig, family: Family, n_realizations: usize, grid: (usize, usize)) -> Result<NoiseStudy> {
    let (_, poses) = simulate_with_poses(cfg)?;
    let g = Grid { nx: grid.0, ny: grid.1, width: cfg.image_size[0] as f64, height: cfg.image_size[1] as f64 }.points();
    // the poses are fixed and known, so each realization starts at the truth
    // when the family can express it
    let init = if family == cfg.truth.family() {
        Initialization::Full { camera: cfg.truth.clone(), poses: poses.clone() }
    } else {
        Initialization::Zhang
    };
    let opts = CalibrationOptions { init, ..Default::default() };
    let calibrate_one = |i: usize| -> Result<CalibrationResult> { calibrate(&resimulate_noise(cfg, &poses, 1 + i as u64)?, family, &opts) };
    if n_realizations == 0 {
        return Err(Error::InvalidConfig("no realizations".into()));
    }
    let res = calibrate_one(0)?;
    let mut true_k = vec![mapping_error(&res.camera, &cfg.truth, &g, Compensation::Rotation)?.k];
    true_k.extend(
        (1..n_realizations)
            .into_par_iter()
            .map(|i| Ok(mapping_error(&calibrate_one(i)?.camera, &cfg.truth, &g, Compensation::Rotation)?.k))
            .collect::<Result<Vec<f64>>>()?,
    );
    let h = model_matrix(&res.camera, &g, Compensation::Rotation)?.h;
    let e = eme(&standard_covariance(&res)?.sigma, &h)?;
    Ok(NoiseStudy { true_k, eigenvalues: e.eigenvalues, eme: e.eme })
}

/// Selection rule for the next calibration image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Eme,
    TraceSigma,
    Random,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eme" => Ok(Criterion::Eme),
            "trace" | "trace_sigma" => Ok(Criterion::TraceSigma),
            "random" => Ok(Criterion::Random),
            other => Err(Error::InvalidConfig(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Intrinsics information a new frame would add: the Schur complement of its
/// pose block in the normal matrix of its predicted noise-free observations.
fn candidate_information(cam: &CameraModel, target: &crate::calib::TargetGeometry, pose: &Pose, image: (f64, f64)) -> Option<DMatrix<f64>> {
    let obs: Vec<Observation> = (0..target.num_corners())
        .filter_map(|c| {
            let u = cam.project(&pose.transform(&target.corner(c))).ok()?;
            (u.x >= 0.0 && u.x < image.0 && u.y >= 0.0 && u.y < image.1).then_some(Observation { corner: c, u: u.x, v: u.y })
        })
        .collect();
    if obs.len() < 4 {
        return None;
    }
    let ds = Dataset { target: target.clone(), frames: vec![Frame { id: 0, obs }], image_size: None };
    let problem = CalibrationProblem::new(&ds, cam.family(), false);
    let lin = problem.group_linearize(0, cam.theta(), &pose.to_array()).ok()?;
    let (g, l) = (lin.global, lin.local);
    let v = l.tr_mul(&l);
    let w = g.tr_mul(&l);
    let vinv_wt = v.cholesky()?.solve(&w.transpose());
    Some(g.tr_mul(&g) - w * vinv_wt)
}

/// Scores and choice of one guidance step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceChoice {
    pub index: usize,
    /// Criterion value per candidate (`None` for candidates showing fewer
    /// than four corners, and for the random criterion).
    pub scores: Vec<Option<f64>>,
}

/// Picks the candidate pose minimizing the predicted EME or covariance trace
/// after adding it, or a uniformly random one.
///
/// `param_scale` expresses the intrinsics in rescaled units
/// `theta'_i = s_i theta_i` before the criterion is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn guide_next_pose(
    result: &CalibrationResult,
    target: &crate::calib::TargetGeometry,
    image: (f64, f64),
    candidates: &[Pose],
    criterion: Criterion,
    param_scale: Option<&[f64]>,
    grid: (usize, usize),
    rng: &mut impl Rng,
) -> Result<GuidanceChoice> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate poses".into()));
    }
    if candidates.len() == 1 {
        return Ok(GuidanceChoice { index: 0, scores: vec![None] });
    }
    if criterion == Criterion::Random {
        return Ok(GuidanceChoice { index: rng.random_range(0..candidates.len()), scores: vec![None; candidates.len()] });
    }
    let nt = result.camera.num_params();
    let dinv = DVector::from_iterator(nt, (0..nt).map(|i| 1.0 / param_scale.map_or(1.0, |s| s[i])));
    let rescale = |m: &DMatrix<f64>| DMatrix::from_fn(nt, nt, |i, j| m[(i, j)] * dinv[i] * dinv[j]);
    let s = rescale(&intrinsics_information(&result.jacobian)?);
    let h = match criterion {
        Criterion::Eme => {
            let g = Grid { nx: grid.0, ny: grid.1, width: image.0, height: image.1 }.points();
            Some(rescale(&model_matrix(&result.camera, &g, Compensation::Rotation)?.h))
        }
        _ => None,
    };
    let s_d_sq = result.s_d_sq();
    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|p| {
            let sc = rescale(&candidate_information(&result.camera, target, p, image)?);
            let sigma = solve_spd_multi(&s + sc, &DMatrix::identity(nt, nt)).ok()? * s_d_sq;
            Some(match &h {
                Some(h) => (&sigma * h).trace(),
                None => sigma.trace(),
            })
        })
        .collect();
    let index = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::DegenerateConfiguration("no candidate shows enough corners".into()))?;
    Ok(GuidanceChoice { index, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub seed: u64,
    pub n_initial: usize,
    pub n_steps: usize,
    pub pool_size: usize,
    pub criterion: Criterion,
    /// Multiplier applied to the focal-length parameters when evaluating the
    /// criterion (a pure reparametrization).
    pub focal_scale: f64,
    pub grid: (usize, usize),
}

impl GuidanceConfig {
    pub fn new(criterion: Criterion, seed: u64) -> Self {
        Self { seed, n_initial: 2, n_steps: 10, pool_size: 64, criterion, focal_scale: 1.0, grid: (10, 10) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRun {
    pub criterion: Criterion,
    pub seed: u64,
    /// Pool indices in selection order.
    pub selected: Vec<usize>,
    /// EME (standard covariance) after each step.
    pub eme: Vec<f64>,
    /// Mapping error against the truth after each step.
    pub true_k: Vec<f64>,
}

/// Greedy image selection on simulated data: start from `n_initial` random
/// frames, then repeatedly add the pool pose picked by the criterion.
pub fn guidance_run(cfg: &GuidanceConfig) -> Result<GuidanceRun> {
    let sim_cfg = SimConfig::standard(cfg.n_initial, cfg.seed);
    let family = Scenario::Ideal.model();
    let image = (sim_cfg.image_size[0] as f64, sim_cfg.image_size[1] as f64);
    let g = Grid { nx: cfg.grid.0, ny: cfg.grid.1, width: image.0, height: image.1 }.points();

    let mut pool_rng = sim_cfg.rng(1);
    let pool: Vec<Pose> = (0..cfg.pool_size).map(|_| sample_visible_pose(&sim_cfg, &mut pool_rng).map(|p| p.0)).collect::<Result<_>>()?;
    let (mut ds, _) = simulate_with_poses(&sim_cfg)?;
    let mut noise_rng = sim_cfg.rng(2);
    let mut pick_rng = sim_cfg.rng(3);

    // nominal starting camera: no distortion, principal point at the center
    let nominal = CameraModel::from_pinhole(family, 1000.0, 1000.0, 0.5 * image.0, 0.5 * image.1)?;
    let mut cam = nominal;
    let mut available: Vec<usize> = (0..pool.len()).collect();
    let scale: Vec<f64> = (0..family.num_params()).map(|i| if family.focal_indices().contains(&i) { cfg.focal_scale } else { 1.0 }).collect();
    let mut run = GuidanceRun { criterion: cfg.criterion, seed: cfg.seed, selected: Vec::new(), eme: Vec::new(), true_k: Vec::new() };

    for _ in 0..cfg.n_steps {
        let res = calibrate(&ds, family, &CalibrationOptions { init: Initialization::Camera(cam.clone()), ..Default::default() })?;
        let cands: Vec<Pose> = available.iter().map(|&i| pool[i]).collect();
        let choice = guide_next_pose(&res, &ds.target, image, &cands, cfg.criterion, Some(&scale), cfg.grid, &mut pick_rng)?;
        let idx = available.remove(choice.index);
        run.selected.push(idx);
        ds.frames.push(observe(&sim_cfg, &pool[idx], ds.frames.len() as i64, &mut noise_rng));
        cam = res.camera;
    }
    let res = calibrate(&ds, family, &CalibrationOptions { init: Initialization::Camera(cam), ..Default::default() })?;
    let h = model_matrix(&res.camera, &g, Compensation::Rotation)?.h;
    run.eme.push(eme(&standard_covariance(&res)?.sigma, &h)?.eme);
    run.true_k.push(mapping_error(&res.camera, &sim_cfg.truth, &g, Compensation::Rotation)?.k);
    Ok(run)
}

fn observe(cfg: &SimConfig, pose: &Pose, id: i64, rng: &mut impl Rng) -> Frame {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let obs = sim::visible_corners(cfg, pose)
        .into_iter()
        .map(|(c, u)| Observation { corner: c, u: u.x + noise.sample(rng), v: u.y + noise.sample(rng) })
        .collect();
    Frame { id, obs }
}

/// Simulated dataset for a scenario, as used by the runners.
pub fn scenario_dataset(scenario: Scenario, n_frames: usize, seed: u64) -> Result<Dataset> {
    sim::simulate(&scenario.config(n_frames, seed))
}
