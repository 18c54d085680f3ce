mod props;

use calibaudit_core::calib::{intrinsics_information, Initialization};
use calibaudit_core::experiments::{guide_next_pose, Criterion};
use calibaudit_core::sim::{sample_visible_pose, simulate_with_poses, SimConfig};
use calibaudit_core::stats;
use calibaudit_core::uncertainty::{
    approx_bootstrap_covariance, bootstrap_draws, eme, mapping_error, model_matrix, recompose, BootstrapConfig, BootstrapMode,
    Compensation, Grid,
};
use calibaudit_core::*;
use nalgebra::{DMatrix, DVector};
use props::linear::{bootstrap_gap, LinearGroups};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn calibrated(n_frames: usize, seed: u64) -> (Dataset, CalibrationResult, SimConfig) {
    let cfg = SimConfig::standard(n_frames, seed);
    let (ds, poses) = simulate_with_poses(&cfg).unwrap();
    let opts = CalibrationOptions { init: Initialization::Full { camera: cfg.truth.clone(), poses }, ..Default::default() };
    let res = calibrate(&ds, cfg.truth.family(), &opts).unwrap();
    (ds, res, cfg)
}

#[test]
fn one_step_bootstrap_is_exact_on_linear_problems() {
    for seed in 0..5 {
        let problem = LinearGroups::random(12, 6, 3, 2, seed);
        let draws = bootstrap_draws(12, &BootstrapConfig { n_samples: 50, seed, mode: BootstrapMode::Full }).unwrap();
        let gap = bootstrap_gap(&problem, &draws);
        assert!(gap < 1e-9, "seed {seed}: relative gap {gap:e}");
    }
}

#[test]
fn recompose_duplicates_and_drops_frames() {
    let (_, res, _) = calibrated(3, 4);
    // frame 1 twice, frame 2 left out
    let (bj, r) = recompose(&res, &[0, 1, 1]);
    let offsets = res.jacobian.row_offsets();
    let rows = |g: usize| offsets[g]..offsets[g + 1];
    let mut expect = res.residuals.rows_range(rows(0)).iter().copied().collect::<Vec<_>>();
    expect.extend(res.residuals.rows_range(rows(1)).iter());
    expect.extend(res.residuals.rows_range(rows(1)).iter());
    assert_eq!(r.as_slice(), &expect[..]);
    assert_eq!(bj.num_blocks, 2);
    assert_eq!(bj.rows.iter().map(|b| b.block).collect::<Vec<_>>(), vec![0, 1, 1]);
    assert_eq!(bj.rows[1].global, res.jacobian.rows[1].global);
    assert_eq!(bj.rows[2].local, res.jacobian.rows[1].local);
    let nt = res.camera.num_params();
    assert_eq!(bj.to_dense().ncols(), nt + 12);
}

#[test]
fn zero_residuals_give_zero_one_step_covariance() {
    let (_, mut res, _) = calibrated(6, 2);
    res.residuals.fill(0.0);
    let cov = approx_bootstrap_covariance(&res, &BootstrapConfig { n_samples: 20, seed: 1, mode: BootstrapMode::Approximated }).unwrap();
    assert!(cov.sigma.amax() < 1e-20);
}

#[test]
fn eme_matches_monte_carlo_mapping_error() {
    let (_, res, cfg) = calibrated(15, 7);
    let grid = Grid::default_for(cfg.image_size[0] as f64, cfg.image_size[1] as f64).points();
    let sigma = standard_covariance(&res).unwrap().sigma;
    let h = model_matrix(&res.camera, &grid, Compensation::Rotation).unwrap().h;
    let predicted = eme(&sigma, &h).unwrap().eme;
    let root = stats::sqrtm_psd(&sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nt = res.camera.num_params();
    let ks: Vec<f64> = (0..10_000)
        .map(|_| {
            let z = DVector::from_fn(nt, |_, _| StandardNormal.sample(&mut rng));
            let cam = res.camera.perturbed((&root * z).as_slice()).unwrap();
            mapping_error(&cam, &res.camera, &grid, Compensation::Rotation).unwrap().k
        })
        .collect();
    let (mean, se) = (stats::mean(&ks), stats::std_error(&ks));
    assert!((mean - predicted).abs() < 3.0 * se, "monte carlo {mean} +- {se} vs eme {predicted}");
}

#[test]
fn eme_is_invariant_under_parameter_scaling() {
    let (_, res, cfg) = calibrated(10, 3);
    let grid = Grid::default_for(cfg.image_size[0] as f64, cfg.image_size[1] as f64).points();
    let sigma = standard_covariance(&res).unwrap().sigma;
    let h = model_matrix(&res.camera, &grid, Compensation::Rotation).unwrap().h;
    let base = eme(&sigma, &h).unwrap().eme;
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 1.0, 1.0, 7.0, 0.5]));
    let d_inv = d.clone().try_inverse().unwrap();
    let (sigma2, h2) = (&d * &sigma * &d, &d_inv * &h * &d_inv);
    let scaled = eme(&sigma2, &h2).unwrap().eme;
    assert!((scaled - base).abs() <= 1e-8 * base, "{scaled} vs {base}");
    assert!((sigma2.trace() - sigma.trace()).abs() > 0.5 * sigma.trace());
}

#[test]
fn duplicated_frames_halve_the_covariance() {
    let (ds, res, _) = calibrated(8, 5);
    let mut doubled = ds.clone();
    doubled.frames.extend(ds.frames.iter().cloned());
    let mut poses = res.poses.clone();
    poses.extend(res.poses.iter().cloned());
    let opts = CalibrationOptions { init: Initialization::Full { camera: res.camera.clone(), poses }, ..Default::default() };
    let res2 = calibrate(&doubled, res.camera.family(), &opts).unwrap();
    let info = intrinsics_information(&res.jacobian).unwrap();
    let info2 = intrinsics_information(&res2.jacobian).unwrap();
    let gap = (&info2 - &info * 2.0).amax() / info.amax();
    assert!(gap < 1e-6, "information did not double: {gap:e}");
}

#[test]
fn eme_guidance_ignores_focal_rescaling() {
    let (ds, res, cfg) = calibrated(4, 9);
    let mut rng = cfg.rng(5);
    let cands: Vec<Pose> = (0..12).map(|_| sample_visible_pose(&cfg, &mut rng).unwrap().0).collect();
    let image = (cfg.image_size[0] as f64, cfg.image_size[1] as f64);
    let scale = [0.01, 0.01, 1.0, 1.0, 1.0, 1.0];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let plain = guide_next_pose(&res, &ds.target, image, &cands, Criterion::Eme, None, (10, 10), &mut r).unwrap();
    let scaled = guide_next_pose(&res, &ds.target, image, &cands, Criterion::Eme, Some(&scale), (10, 10), &mut r).unwrap();
    assert_eq!(plain.index, scaled.index);
    for (a, b) in plain.scores.iter().zip(&scaled.scores) {
        let (a, b) = (a.unwrap(), b.unwrap());
        assert!((a - b).abs() <= 1e-8 * a, "{a} vs {b}");
    }
}

#[test]
fn single_candidate_is_returned_for_every_criterion() {
    let (ds, res, cfg) = calibrated(4, 1);
    let pose = sample_visible_pose(&cfg, &mut cfg.rng(9)).unwrap().0;
    for c in [Criterion::Eme, Criterion::TraceSigma, Criterion::Random] {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let choice = guide_next_pose(&res, &ds.target, (1280.0, 960.0), &[pose], c, None, (10, 10), &mut r).unwrap();
        assert_eq!(choice.index, 0);
    }
}
