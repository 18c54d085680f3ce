// Randomized property checks shared by the `properties` and `acceptance`
// test targets. Each check runs a deterministic proptest runner for the
// requested number of cases and reports the first minimal failure.

#![allow(dead_code)]

use calibaudit_core::bias::{bias_ratio_from, decompose_virtual_targets};
use calibaudit_core::calib::{CalibrationProblem, Initialization};
use calibaudit_core::camera::{PreparedPose, MAX_INTRINSICS};
use calibaudit_core::sim::{simulate_with_poses, SimConfig};
use calibaudit_core::solver::GroupedProblem;
use calibaudit_core::stats;
use calibaudit_core::uncertainty::{
    approx_bootstrap_covariance_with_draws, bootstrap_covariance_with_draws, bootstrap_draws, eme, model_matrix,
    BootstrapConfig, BootstrapMode, Compensation, Grid,
};
use calibaudit_core::*;
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};

pub type Check = fn(u32) -> Result<(), String>;

/// Every property with its name.
pub const ALL: [(&str, Check); 10] = [
    ("projection round trip", projection_round_trip),
    ("projection jacobian vs finite differences", projection_jacobian),
    ("rotation jacobian vs finite differences", rotation_jacobian),
    ("calibration jacobian vs finite differences", calibration_jacobian),
    ("model matrix symmetric psd", model_matrix_psd),
    ("covariances symmetric psd", covariances_psd),
    ("bias ratio in unit interval", bias_ratio_bounds),
    ("trace identity", trace_identity),
    ("rotation compensation lowers the quadratic form", compensation_order),
    ("virtual targets disjoint", quads_disjoint),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, max_global_rejects: 100 * cases, ..Config::default() };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::LADDER.to_vec())
}

fn camera() -> impl Strategy<Value = CameraModel> {
    (family(), 300.0..3000.0f64, 0.9..1.1f64, 200.0..1000.0f64, 200.0..800.0f64, prop::array::uniform4(-1.0..1.0f64)).prop_map(
        |(fam, f, aspect, cx, cy, k)| {
            let mut theta = match fam {
                Family::Pinhole3 => vec![f, cx, cy],
                _ => vec![f, f * aspect, cx, cy],
            };
            let scale = match fam {
                Family::Fisheye4 => [0.05, 0.01, 0.005, 0.001],
                _ => [0.3, 0.05, 0.01, 0.0],
            };
            theta.extend((0..fam.num_distortion()).map(|i| k[i] * scale[i]));
            CameraModel::new(fam, theta).unwrap()
        },
    )
}

fn monotone_up_to(cam: &CameraModel, s: f64) -> bool {
    (0..=32).all(|i| cam.is_monotone_at(s * i as f64 / 32.0))
}

pub fn projection_round_trip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(camera(), -0.8..0.8f64, -0.8..0.8f64), |(cam, xn, yn)| {
            prop_assume!(monotone_up_to(&cam, xn * xn + yn * yn));
            let x = Vector3::new(xn, yn, 1.0);
            let u = cam.project(&x).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let ray = cam.unproject(&u).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            prop_assert!(ray.direction.z > 0.0);
            let angle = ray.direction.cross(&x.normalize()).norm();
            prop_assert!(angle < 1e-9, "ray off by {angle}");
            let back = cam.project(&ray.direction).unwrap();
            prop_assert!((back - u).norm() < 1e-6, "pixel off by {}", (back - u).norm());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn projection_jacobian(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(camera(), -0.7..0.7f64, -0.7..0.7f64, 0.5..5.0f64), |(cam, xn, yn, z)| {
            prop_assume!(monotone_up_to(&cam, xn * xn + yn * yn));
            let xc = Vector3::new(xn * z, yn * z, z);
            let p = cam.project_with_jacobians(&xc).unwrap();
            prop_assert!((p.pixel - cam.project(&xc).unwrap()).norm() == 0.0);
            for c in 0..cam.num_params() {
                let h = 1e-5 * cam.theta()[c].abs().max(1.0);
                let mut d = vec![0.0; cam.num_params()];
                d[c] = h;
                let plus = cam.perturbed(&d).unwrap().project(&xc).unwrap();
                d[c] = -h;
                let minus = cam.perturbed(&d).unwrap().project(&xc).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let an = Vector2::new(p.d_theta[(0, c)], p.d_theta[(1, c)]);
                prop_assert!((fd - an).norm() <= 1e-5 * (1.0 + an.norm()), "theta {c}: {fd} vs {an}");
            }
            for c in cam.num_params()..MAX_INTRINSICS {
                prop_assert!(p.d_theta[(0, c)] == 0.0 && p.d_theta[(1, c)] == 0.0);
            }
            for c in 0..3 {
                let h = 1e-6 * z;
                let mut e = Vector3::zeros();
                e[c] = h;
                let fd = (cam.project(&(xc + e)).unwrap() - cam.project(&(xc - e)).unwrap()) / (2.0 * h);
                let an = Vector2::new(p.d_point[(0, c)], p.d_point[(1, c)]);
                prop_assert!((fd - an).norm() <= 1e-5 * (1.0 + an.norm()), "point {c}: {fd} vs {an}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn small_config(n_frames: usize, seed: u64) -> SimConfig {
    SimConfig { target: TargetGeometry::new(6, 8, 0.12), ..SimConfig::standard(n_frames, seed) }
}

pub fn calibration_jacobian(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(any::<u64>(), prop::array::uniform6(-1.0..1.0f64), prop::array::uniform6(-1.0..1.0f64)), |(seed, dt, dp)| {
            let cfg = small_config(1, seed);
            let (ds, poses) = simulate_with_poses(&cfg).map_err(|e| TestCaseError::reject(e.to_string()))?;
            let problem = CalibrationProblem::new(&ds.normalized(), cfg.truth.family(), true);
            let scale = [5.0, 5.0, 5.0, 5.0, 0.01, 0.001];
            let theta: Vec<f64> = cfg.truth.theta().iter().zip(dt.iter().zip(scale)).map(|(t, (d, s))| t + d * s).collect();
            let pose: Vec<f64> = poses[0].to_array().iter().zip(dp).map(|(p, d)| p + 0.01 * d).collect();
            let lin = problem.group_linearize(0, &theta, &pose).map_err(|e| TestCaseError::reject(e.to_string()))?;
            let check = |x: &[f64], c: usize, analytic: DVector<f64>, global: bool| -> Result<(), TestCaseError> {
                let h = 1e-6 * x[c].abs().max(1e-2);
                let eval = |sign: f64| {
                    let mut y = x.to_vec();
                    y[c] += sign * h;
                    if global {
                        problem.group_residuals(0, &y, &pose)
                    } else {
                        problem.group_residuals(0, &theta, &y)
                    }
                };
                let (plus, minus) = match (eval(1.0), eval(-1.0)) {
                    (Ok(p), Ok(m)) => (p, m),
                    _ => return Err(TestCaseError::reject("step left the valid region")),
                };
                let fd = (plus - minus) / (2.0 * h);
                let err = (&fd - &analytic).amax();
                prop_assert!(err <= 1e-4 * (1.0 + analytic.amax()), "column {c} (global {global}): error {err}");
                Ok(())
            };
            for c in 0..theta.len() {
                check(&theta, c, lin.global.column(c).into_owned(), true)?;
            }
            for c in 0..6 {
                check(&pose, c, lin.local.column(c).into_owned(), false)?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(f64::MIN_POSITIVE)
}

pub fn model_matrix_psd(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(camera(), 3usize..8, 3usize..8), |(cam, nx, ny)| {
            let (cx, cy) = cam.principal_point();
            // keep the grid inside the monotone part of the sensor
            let (f, _) = cam.focal();
            let (w, h) = (2.0 * cx.min(0.8 * f), 2.0 * cy.min(0.8 * f));
            prop_assume!(monotone_up_to(&cam, 1.3));
            let grid = Grid { nx, ny, width: w, height: h }.points();
            let grid: Vec<Vector2<f64>> = grid.iter().map(|u| u + Vector2::new(cx - 0.5 * w, cy - 0.5 * h)).collect();
            for comp in [Compensation::None, Compensation::Rotation] {
                // grid pixels outside the invertible region are not a property failure
                let m = model_matrix(&cam, &grid, comp).map_err(|e| TestCaseError::reject(e.to_string()))?;
                prop_assert!(is_symmetric(&m.h));
                prop_assert!(stats::is_psd(&m.h, 1e-10), "{comp:?} not psd");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn covariances_psd(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(any::<u64>(), 5usize..8), |(seed, n_frames)| {
            let cfg = small_config(n_frames, seed);
            let (ds, poses) = simulate_with_poses(&cfg).map_err(|e| TestCaseError::reject(e.to_string()))?;
            let opts = CalibrationOptions { init: Initialization::Full { camera: cfg.truth.clone(), poses }, ..Default::default() };
            let res = calibrate(&ds, cfg.truth.family(), &opts).map_err(|e| TestCaseError::reject(e.to_string()))?;
            let draws = bootstrap_draws(n_frames, &BootstrapConfig { n_samples: 4, seed, mode: BootstrapMode::Full }).unwrap();
            let mut covs = vec![standard_covariance(&res).map_err(|e| TestCaseError::fail(e.to_string()))?.sigma];
            // a draw may miss the frames that pin down some parameter
            if let Ok(c) = approx_bootstrap_covariance_with_draws(&res, &draws) {
                covs.push(c.sigma);
            }
            if let Ok(c) = bootstrap_covariance_with_draws(&ds, &res, &draws, &Default::default()) {
                covs.push(c.sigma);
            }
            for s in &covs {
                prop_assert!(is_symmetric(s));
                prop_assert!(stats::is_psd(s, 1e-10));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn bias_ratio_bounds(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(0.0..10.0f64, 0.01..1.0f64, 0.0..10.0f64), |(mse, dof, sigma_sq)| {
            let b = bias_ratio_from(mse, dof, sigma_sq, 10, 80);
            prop_assert!((0.0..=1.0).contains(&b.bias_ratio), "ratio {}", b.bias_ratio);
            prop_assert!(b.bias_sq >= 0.0);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn random_psd(n: usize, rank: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(n, rank, entries.iter().copied().cycle().take(n * rank));
    &a * a.transpose()
}

pub fn trace_identity(cases: u32) -> Result<(), String> {
    let strat = (1usize..9, 1usize..9, 1usize..9, prop::collection::vec(-3.0..3.0f64, 81), prop::collection::vec(-3.0..3.0f64, 81));
    runner(cases)
        .run(&strat, |(n, ra, rb, ea, eb)| {
            let sigma = random_psd(n, ra, &ea);
            let h = random_psd(n, rb, &eb);
            let e = eme(&sigma, &h).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let direct = (&sigma * &h).trace();
            let tol = 1e-10 * (1.0 + sigma.norm() * h.norm());
            prop_assert!((e.eme - direct).abs() <= tol, "{} vs {}", e.eme, direct);
            prop_assert!((e.eigenvalues.iter().sum::<f64>() - e.eme).abs() <= tol);
            prop_assert!(e.eigenvalues.iter().all(|&l| l >= -tol));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn compensation_order(cases: u32) -> Result<(), String> {
    let grid = Grid::default_for(1280.0, 960.0).points();
    runner(cases)
        .run(&(-0.3..0.0f64, 0.0..0.03f64, prop::collection::vec(-1.0..1.0f64, 6)), |(k1, k2, d)| {
            let cam = CameraModel::new(Family::PinholeRadial(2), vec![800.0, 810.0, 640.0, 480.0, k1, k2]).unwrap();
            prop_assume!(monotone_up_to(&cam, 1.3));
            let none = model_matrix(&cam, &grid, Compensation::None).map_err(|e| TestCaseError::reject(e.to_string()))?.h;
            let rot = model_matrix(&cam, &grid, Compensation::Rotation).map_err(|e| TestCaseError::reject(e.to_string()))?.h;
            let d = DVector::from_vec(d);
            let (qn, qr) = ((d.transpose() * &none * &d)[0], (d.transpose() * &rot * &d)[0]);
            prop_assert!(qr <= qn + 1e-10 * (1.0 + qn), "{qr} > {qn}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn quads_disjoint(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(2usize..30, 2usize..30), |(rows, cols)| {
            let t = TargetGeometry::new(rows, cols, 0.1);
            let quads = decompose_virtual_targets(&t).unwrap();
            prop_assert_eq!(quads.len(), (rows / 2) * (cols / 2));
            let mut seen = vec![false; rows * cols];
            for q in &quads {
                for &c in q {
                    prop_assert!(!std::mem::replace(&mut seen[c], true), "corner {} reused", c);
                }
                let (r0, c0) = (q[0] / cols, q[0] % cols);
                let mut expect = [q[0], q[0] + 1, q[0] + cols, q[0] + cols + 1];
                let mut got = *q;
                expect.sort();
                got.sort();
                prop_assert_eq!(got, expect);
                prop_assert!(r0 + 1 < rows && c0 + 1 < cols);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn rotation_jacobian(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-2.0..2.0f64)), |(w, x)| {
            let w = Vector3::from(w);
            prop_assume!(w.norm() < 3.0);
            let x = Vector3::from(x);
            let pose = Pose::new(w, Vector3::zeros());
            let (_, jac) = PreparedPose::new(&pose).transform_with_jacobian(&x);
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = 1e-6;
                let fd = (Pose::new(w + e, Vector3::zeros()).transform(&x) - Pose::new(w - e, Vector3::zeros()).transform(&x)) / 2e-6;
                prop_assert!((fd - jac.column(c)).norm() < 1e-6 * (1.0 + x.norm()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub mod linear {
    use calibaudit_core::solver::{GroupLinearization, GroupedLeastSquares, GroupedProblem, SolverError, SolverOptions};
    use calibaudit_core::stats;
    use calibaudit_core::uncertainty::{approx_resampled_estimate, resampled_estimate};
    use calibaudit_core::solver::Jacobian;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Groups of linear residuals `y_g - A_g x - B_g p_g` sharing `x`.
    pub struct LinearGroups {
        pub a: Vec<DMatrix<f64>>,
        pub b: Vec<DMatrix<f64>>,
        pub y: Vec<DVector<f64>>,
    }

    impl LinearGroups {
        pub fn random(n_groups: usize, rows: usize, global: usize, local: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let a = (0..n_groups).map(|_| m(rows, global)).collect();
            let b = (0..n_groups).map(|_| m(rows, local)).collect();
            let y = (0..n_groups).map(|_| m(rows, 1).column(0).into_owned()).collect();
            Self { a, b, y }
        }
    }

    impl GroupedProblem for LinearGroups {
        fn global_dim(&self) -> usize {
            self.a[0].ncols()
        }
        fn local_dim(&self) -> usize {
            self.b[0].ncols()
        }
        fn num_groups(&self) -> usize {
            self.a.len()
        }
        fn group_residuals(&self, g: usize, global: &[f64], local: &[f64]) -> Result<DVector<f64>, SolverError> {
            Ok(&self.y[g] - &self.a[g] * DVector::from_row_slice(global) - &self.b[g] * DVector::from_row_slice(local))
        }
        fn group_linearize(&self, g: usize, global: &[f64], local: &[f64]) -> Result<GroupLinearization, SolverError> {
            Ok(GroupLinearization { residuals: self.group_residuals(g, global, local)?, global: -&self.a[g], local: -&self.b[g] })
        }
    }

    /// Largest entrywise difference between the full and the one-step
    /// bootstrap covariance on the given draws, relative to the largest entry.
    pub fn bootstrap_gap(problem: &LinearGroups, draws: &[Vec<usize>]) -> f64 {
        let gls = GroupedLeastSquares::new(problem);
        // run the iterative fits to machine precision
        let opts = SolverOptions { cost_tolerance: 0.0, step_tolerance: 1e-15, gradient_tolerance: 0.0, ..SolverOptions::default() };
        let x0 = DVector::zeros(problem.global_dim() + problem.local_dim() * problem.num_groups());
        let fit = calibaudit_core::solver::solve(&gls, &x0, &opts).expect("linear fit");
        let jac = match fit.jacobian {
            Jacobian::Block(b) => b,
            Jacobian::Dense(_) => unreachable!(),
        };
        let full: Vec<DVector<f64>> = draws.iter().map(|d| resampled_estimate(problem, &fit.params, d, &opts).unwrap()).collect();
        let approx: Vec<DVector<f64>> =
            draws.iter().map(|d| approx_resampled_estimate(&fit.params, &jac, &fit.residuals, d).unwrap()).collect();
        let (cf, ca) = (stats::sample_covariance(&full), stats::sample_covariance(&approx));
        (cf - &ca).amax() / ca.amax()
    }
}
