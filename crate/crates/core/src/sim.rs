//! Synthetic calibration datasets: random target poses in front of a known
//! camera, exact projection, Gaussian detector noise.

use std::f64::consts::FRAC_PI_4;

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calib::{Dataset, Frame, Observation, TargetGeometry};
use crate::camera::{CameraModel, Family, Pose};
use crate::error::{Error, Result};

/// Uniform sampling ranges of the target pose. Rotations are Euler angles
/// (radians) about the target center; the center is placed at the sampled
/// translation (meters, camera frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub rot_x: (f64, f64),
    pub rot_y: (f64, f64),
    pub rot_z: (f64, f64),
    pub t_x: (f64, f64),
    pub t_y: (f64, f64),
    pub t_z: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            rot_x: (-FRAC_PI_4, FRAC_PI_4),
            rot_y: (-FRAC_PI_4, FRAC_PI_4),
            rot_z: (-FRAC_PI_4, FRAC_PI_4),
            t_x: (-0.5, 0.5),
            t_y: (-0.5, 0.5),
            t_z: (0.5, 2.5),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl PoseRanges {
    /// Draws a target-to-camera pose for a target centered at `center`.
    pub fn sample(&self, rng: &mut impl Rng, center: &Vector3<f64>) -> Pose {
        let rx = uniform(rng, self.rot_x);
        let ry = uniform(rng, self.rot_y);
        let rz = uniform(rng, self.rot_z);
        let t = Vector3::new(uniform(rng, self.t_x), uniform(rng, self.t_y), uniform(rng, self.t_z));
        let r = Rotation3::from_euler_angles(rx, ry, rz).into_inner();
        Pose::from_rotation_matrix(&r, t - r * center)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub truth: CameraModel,
    /// Target geometry; its z offsets (if any) are the true board shape.
    pub target: TargetGeometry,
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub n_frames: usize,
    /// Detector noise standard deviation per coordinate, pixels.
    pub noise_sigma: f64,
    pub poses: PoseRanges,
    pub seed: u64,
    /// Fraction of observations displaced by `outlier_px` in a random direction.
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default)]
    pub outlier_px: f64,
}

/// Simulation presets used by the experiment runners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Truth and calibration model coincide.
    Ideal,
    /// A model with fewer distortion terms than the truth.
    Underfit,
    /// Slightly curved board calibrated as planar, long-focal camera.
    Nonplanar,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Scenario::Ideal),
            "underfit" => Ok(Scenario::Underfit),
            "nonplanar" => Ok(Scenario::Nonplanar),
            other => Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ideal => "ideal",
            Scenario::Underfit => "underfit",
            Scenario::Nonplanar => "nonplanar",
        }
    }

    pub fn config(self, n_frames: usize, seed: u64) -> SimConfig {
        match self {
            Scenario::Ideal | Scenario::Underfit => SimConfig::standard(n_frames, seed),
            Scenario::Nonplanar => SimConfig::nonplanar(n_frames, seed),
        }
    }

    /// Whether the fitted family can represent the truth camera.
    pub fn model_contains_truth(self) -> bool {
        !matches!(self, Scenario::Underfit)
    }

    /// Model family fitted in this scenario.
    pub fn model(self) -> Family {
        match self {
            Scenario::Ideal => Family::PinholeRadial(2),
            Scenario::Underfit => Family::PinholeRadial(1),
            Scenario::Nonplanar => Family::PinholeRadial(2),
        }
    }
}

/// Truth camera of the standard scenario: C(6) with moderate barrel
/// distortion, monotone over the whole image.
pub fn standard_camera() -> CameraModel {
    CameraModel::new(Family::PinholeRadial(2), vec![800.0, 800.0, 640.0, 480.0, -0.1, 0.0075]).expect("valid preset")
}

/// Standard calibration board: 12 x 16 inner corners, 8 cm spacing.
pub fn standard_target() -> TargetGeometry {
    TargetGeometry::new(12, 16, 0.08)
}

/// Smooth bowl-shaped deviation from planarity with peak amplitude
/// `amplitude` meters: zero at the center, `amplitude` at the corners.
pub fn bowl_offsets(target: &TargetGeometry, amplitude: f64) -> Vec<f64> {
    let c = target.center();
    let rmax_sq = c.x * c.x + c.y * c.y;
    (0..target.num_corners())
        .map(|i| {
            let p = target.corner(i);
            let d = Vector2::new(p.x - c.x, p.y - c.y);
            amplitude * d.norm_squared() / rmax_sq
        })
        .collect()
}

impl SimConfig {
    pub fn standard(n_frames: usize, seed: u64) -> Self {
        Self {
            truth: standard_camera(),
            target: standard_target(),
            image_size: [1280, 960],
            n_frames,
            noise_sigma: 0.05,
            poses: PoseRanges::default(),
            seed,
            outlier_fraction: 0.0,
            outlier_px: 0.0,
        }
    }

    /// Long-focal camera with a precise detector viewing a small board
    /// (7 x 10 corners, 5 cm) whose true shape bows out of plane by up to
    /// 1e-4 m.
    pub fn nonplanar(n_frames: usize, seed: u64) -> Self {
        let mut target = TargetGeometry::new(7, 10, 0.05);
        target.z_offsets = Some(bowl_offsets(&target, 1e-4));
        Self {
            truth: CameraModel::new(Family::PinholeRadial(2), vec![8000.0, 8000.0, 640.0, 480.0, 0.0, 0.0]).expect("valid preset"),
            target,
            noise_sigma: 0.02,
            poses: PoseRanges { t_x: (-0.05, 0.05), t_y: (-0.05, 0.05), t_z: (2.0, 3.0), ..PoseRanges::default() },
            ..Self::standard(n_frames, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidConfig("outlier fraction must lie in [0, 1]".into()));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        Ok(())
    }

    /// Random generator for replicate `stream` of this configuration.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Exact projections of the target corners that land inside the image.
pub(crate) fn visible_corners(cfg: &SimConfig, pose: &Pose) -> Vec<(usize, Vector2<f64>)> {
    let (w, h) = (cfg.image_size[0] as f64, cfg.image_size[1] as f64);
    (0..cfg.target.num_corners())
        .filter_map(|i| {
            let xc = pose.transform(&cfg.target.corner(i));
            if xc.z <= 0.0 {
                return None;
            }
            let u = cfg.truth.project(&xc).ok()?;
            // the projection must also be unambiguous (monotone distortion)
            let s = (xc.x / xc.z).powi(2) + (xc.y / xc.z).powi(2);
            (u.x >= 0.0 && u.x < w && u.y >= 0.0 && u.y < h && cfg.truth.is_monotone_at(s)).then_some((i, u))
        })
        .collect()
}

fn spans_plane(target: &TargetGeometry, vis: &[(usize, Vector2<f64>)]) -> bool {
    let rows: std::collections::BTreeSet<usize> = vis.iter().map(|(i, _)| i / target.cols).collect();
    let cols: std::collections::BTreeSet<usize> = vis.iter().map(|(i, _)| i % target.cols).collect();
    vis.len() >= 4 && rows.len() >= 2 && cols.len() >= 2
}

/// Draws a pose whose view shows at least four non-collinear corners.
pub fn sample_visible_pose(cfg: &SimConfig, rng: &mut impl Rng) -> Result<(Pose, Vec<(usize, Vector2<f64>)>)> {
    let center = cfg.target.center();
    for _ in 0..100 {
        let pose = cfg.poses.sample(rng, &center);
        let vis = visible_corners(cfg, &pose);
        if spans_plane(&cfg.target, &vis) {
            return Ok((pose, vis));
        }
    }
    Err(Error::CannotPlaceTarget)
}

/// Simulated dataset together with the true poses.
pub fn simulate_with_poses(cfg: &SimConfig) -> Result<(Dataset, Vec<Pose>)> {
    cfg.validate()?;
    let mut rng = cfg.rng(0);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut poses = Vec::with_capacity(cfg.n_frames);
    for j in 0..cfg.n_frames {
        let (pose, vis) = sample_visible_pose(cfg, &mut rng)?;
        let obs = vis
            .into_iter()
            .map(|(c, u)| {
                let mut o = Observation { corner: c, u: u.x + noise.sample(&mut rng), v: u.y + noise.sample(&mut rng) };
                if cfg.outlier_fraction > 0.0 && rng.random::<f64>() < cfg.outlier_fraction {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    o.u += cfg.outlier_px * a.cos();
                    o.v += cfg.outlier_px * a.sin();
                }
                o
            })
            .collect();
        frames.push(Frame { id: j as i64, obs });
        poses.push(pose);
    }
    Ok((Dataset { target: cfg.target.clone(), frames, image_size: Some(cfg.image_size) }, poses))
}

/// Simulated dataset; deterministic for a given configuration.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    Ok(simulate_with_poses(cfg)?.0)
}

/// Re-draws only the detector noise of a dataset around the exact
/// projections of known poses; used for noise-only Monte-Carlo studies.
pub fn resimulate_noise(cfg: &SimConfig, poses: &[Pose], stream: u64) -> Result<Dataset> {
    let mut rng = cfg.rng(stream);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let frames = poses
        .iter()
        .enumerate()
        .map(|(j, pose)| Frame {
            id: j as i64,
            obs: visible_corners(cfg, pose)
                .into_iter()
                .map(|(c, u)| Observation { corner: c, u: u.x + noise.sample(&mut rng), v: u.y + noise.sample(&mut rng) })
                .collect(),
        })
        .collect();
    Ok(Dataset { target: cfg.target.clone(), frames, image_size: Some(cfg.image_size) })
}
