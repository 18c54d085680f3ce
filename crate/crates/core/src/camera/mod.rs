//! Parametric central camera models: pinhole, pinhole with radial distortion
//! and the equidistant fisheye polynomial.
//!
//! Intrinsics are stored as a flat vector `theta` whose layout depends on the
//! [`Family`]:
//!
//! | family            | theta                                   |
//! |-------------------|-----------------------------------------|
//! | `pinhole3`        | `f, cx, cy`                             |
//! | `pinhole_k{1,2,3}`| `fx, fy, cx, cy, k1 [, k2 [, k3]]`      |
//! | `fisheye4`        | `fx, fy, cx, cy, k1, k2, k3, k4`        |
//!
//! Radial models scale the normalized point by `1 + k1 r^2 + k2 r^4 + k3 r^6`.
//! The fisheye model maps the incidence angle `a = atan(r)` to
//! `a (1 + k1 a^2 + k2 a^4 + k3 a^6 + k4 a^8)` and scales by that over `r`.

mod pose;

pub use pose::{right_jacobian, rodrigues, rotation_log, skew, Pose, PreparedPose};

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest intrinsic vector of any supported family.
pub const MAX_INTRINSICS: usize = 8;

/// Derivative of a pixel with respect to the intrinsics; columns past
/// `family.num_params()` are zero.
pub type IntrinsicsJacobian = SMatrix<f64, 2, MAX_INTRINSICS>;

const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_INVERSION_ITERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point has non-positive depth (z = {0})")]
    NonPositiveDepth(f64),
    #[error("distortion inversion did not converge")]
    NoConvergence,
    #[error("pixel lies outside the invertible region of the distortion model")]
    OutsideInvertibleRegion,
    #[error("invalid camera parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown camera family `{0}`")]
    UnknownFamily(String),
}

/// Camera model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    /// Single focal length, no distortion: C(3).
    Pinhole3,
    /// Separate focal lengths and `n` radial coefficients (1..=3): C(4+n).
    PinholeRadial(u8),
    /// Equidistant fisheye polynomial with four coefficients: C(8).
    Fisheye4,
}

impl Family {
    /// The model ladder C(3), C(5), C(6), C(7), C(8).
    pub const LADDER: [Family; 5] = [
        Family::Pinhole3,
        Family::PinholeRadial(1),
        Family::PinholeRadial(2),
        Family::PinholeRadial(3),
        Family::Fisheye4,
    ];

    pub fn num_params(self) -> usize {
        match self {
            Family::Pinhole3 => 3,
            Family::PinholeRadial(n) => 4 + n as usize,
            Family::Fisheye4 => 8,
        }
    }

    pub fn num_distortion(self) -> usize {
        match self {
            Family::Pinhole3 => 0,
            Family::PinholeRadial(n) => n as usize,
            Family::Fisheye4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Pinhole3 => "pinhole3",
            Family::PinholeRadial(1) => "pinhole_k1",
            Family::PinholeRadial(2) => "pinhole_k2",
            Family::PinholeRadial(_) => "pinhole_k3",
            Family::Fisheye4 => "fisheye4",
        }
    }

    /// Complexity label such as `C(6)`.
    pub fn label(self) -> String {
        format!("C({})", self.num_params())
    }

    /// Names of the entries of `theta`.
    pub fn param_names(self) -> Vec<&'static str> {
        const K: [&str; 4] = ["k1", "k2", "k3", "k4"];
        match self {
            Family::Pinhole3 => vec!["f", "cx", "cy"],
            _ => {
                let mut v = vec!["fx", "fy", "cx", "cy"];
                v.extend_from_slice(&K[..self.num_distortion()]);
                v
            }
        }
    }

    /// Indices of the focal-length entries of `theta`.
    pub fn focal_indices(self) -> &'static [usize] {
        match self {
            Family::Pinhole3 => &[0],
            _ => &[0, 1],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = CameraError;

    /// Accepts the serialized names as well as `C3`, `C(5)`, ... labels.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '(' | ')'))
            .collect();
        match norm.as_str() {
            "pinhole3" | "c3" => Ok(Family::Pinhole3),
            "pinhole_k1" | "c5" => Ok(Family::PinholeRadial(1)),
            "pinhole_k2" | "c6" => Ok(Family::PinholeRadial(2)),
            "pinhole_k3" | "c7" => Ok(Family::PinholeRadial(3)),
            "fisheye4" | "c8" => Ok(Family::Fisheye4),
            _ => Err(CameraError::UnknownFamily(s.to_string())),
        }
    }
}

impl TryFrom<String> for Family {
    type Error = CameraError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.name().to_string()
    }
}

/// Unit viewing ray in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Point on the ray at unit depth (`z = 1`).
    pub fn at_unit_depth(&self) -> Vector3<f64> {
        self.direction / self.direction.z
    }
}

/// Pixel together with its derivatives.
#[derive(Clone, Debug)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// `d pixel / d x_c`
    pub d_point: Matrix2x3<f64>,
    /// `d pixel / d theta`
    pub d_theta: IntrinsicsJacobian,
}

/// Intrinsic camera model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRepr", into = "CameraModelRepr")]
pub struct CameraModel {
    family: Family,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraModelRepr {
    family: Family,
    theta: Vec<f64>,
}

impl TryFrom<CameraModelRepr> for CameraModel {
    type Error = CameraError;
    fn try_from(r: CameraModelRepr) -> Result<Self, Self::Error> {
        CameraModel::new(r.family, r.theta)
    }
}

impl From<CameraModel> for CameraModelRepr {
    fn from(c: CameraModel) -> Self {
        CameraModelRepr { family: c.family, theta: c.theta }
    }
}

impl CameraModel {
    pub fn new(family: Family, theta: Vec<f64>) -> Result<Self, CameraError> {
        if let Family::PinholeRadial(n) = family {
            if !(1..=3).contains(&n) {
                return Err(CameraError::InvalidParameters(format!(
                    "radial models take 1 to 3 coefficients, got {n}"
                )));
            }
        }
        if theta.len() != family.num_params() {
            return Err(CameraError::InvalidParameters(format!(
                "{} expects {} parameters, got {}",
                family,
                family.num_params(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CameraError::InvalidParameters("non-finite parameter".into()));
        }
        let cam = Self { family, theta };
        let (fx, fy) = cam.focal();
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::InvalidParameters(format!(
                "focal length must be positive, got ({fx}, {fy})"
            )));
        }
        Ok(cam)
    }

    /// Builds a model of `family` from pinhole quantities with zero distortion.
    pub fn from_pinhole(family: Family, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        let theta = match family {
            Family::Pinhole3 => vec![0.5 * (fx + fy), cx, cy],
            _ => {
                let mut t = vec![fx, fy, cx, cy];
                t.resize(family.num_params(), 0.0);
                t
            }
        };
        Self::new(family, theta)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Same family with a different parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, CameraError> {
        Self::new(self.family, theta)
    }

    /// `theta + delta`.
    pub fn perturbed(&self, delta: &[f64]) -> Result<Self, CameraError> {
        let theta = self.theta.iter().zip(delta).map(|(a, b)| a + b).collect();
        self.with_theta(theta)
    }

    pub fn focal(&self) -> (f64, f64) {
        match self.family {
            Family::Pinhole3 => (self.theta[0], self.theta[0]),
            _ => (self.theta[0], self.theta[1]),
        }
    }

    pub fn principal_point(&self) -> (f64, f64) {
        match self.family {
            Family::Pinhole3 => (self.theta[1], self.theta[2]),
            _ => (self.theta[2], self.theta[3]),
        }
    }

    pub fn distortion(&self) -> &[f64] {
        match self.family {
            Family::Pinhole3 => &[],
            _ => &self.theta[4..],
        }
    }

    /// Converts to another family keeping focal length, principal point and
    /// the shared leading distortion coefficients. Radial and fisheye
    /// coefficients are not interchangeable; they are reset to zero.
    pub fn convert(&self, family: Family) -> Result<Self, CameraError> {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let mut cam = Self::from_pinhole(family, fx, fy, cx, cy)?;
        let same_kind = matches!(
            (self.family, family),
            (Family::PinholeRadial(_), Family::PinholeRadial(_)) | (Family::Fisheye4, Family::Fisheye4)
        );
        if same_kind {
            let n = self.family.num_distortion().min(family.num_distortion());
            cam.theta[4..4 + n].copy_from_slice(&self.distortion()[..n]);
        }
        Ok(cam)
    }

    /// Radial scale `g(s)` of the normalized point and `dg/ds`, with `s = r^2`.
    fn radial_factor(&self, s: f64) -> (f64, f64) {
        let k = self.distortion();
        match self.family {
            Family::Pinhole3 => (1.0, 0.0),
            Family::PinholeRadial(_) => {
                let mut g = 1.0;
                let mut dg = 0.0;
                let mut pow = 1.0; // s^(i-1)
                for (i, ki) in k.iter().enumerate() {
                    dg += (i + 1) as f64 * ki * pow;
                    pow *= s;
                    g += ki * pow;
                }
                (g, dg)
            }
            Family::Fisheye4 => {
                let r = s.sqrt();
                if r < 1e-4 {
                    let a1 = k[0] - 1.0 / 3.0;
                    let a2 = 0.2 - k[0] + k[1];
                    return (1.0 + a1 * s + a2 * s * s, a1 + 2.0 * a2 * s);
                }
                let a = r.atan();
                let a2 = a * a;
                let poly = 1.0 + a2 * (k[0] + a2 * (k[1] + a2 * (k[2] + a2 * k[3])));
                let dpoly = 1.0 + a2 * (3.0 * k[0] + a2 * (5.0 * k[1] + a2 * (7.0 * k[2] + a2 * 9.0 * k[3])));
                let theta_d = a * poly;
                let dtheta_dr = dpoly / (1.0 + s);
                let g = theta_d / r;
                let dg_dr = (dtheta_dr - g) / r;
                (g, dg_dr / (2.0 * r))
            }
        }
    }

    /// `d g / d k_i` written into `out[..num_distortion]`.
    fn radial_factor_partials(&self, s: f64, out: &mut [f64; 4]) {
        match self.family {
            Family::Pinhole3 => {}
            Family::PinholeRadial(n) => {
                let mut pow = 1.0;
                for o in out.iter_mut().take(n as usize) {
                    pow *= s;
                    *o = pow;
                }
            }
            Family::Fisheye4 => {
                let r = s.sqrt();
                let (a, ratio) = if r < 1e-8 { (r, 1.0 - s / 3.0) } else { (r.atan(), r.atan() / r) };
                let a2 = a * a;
                let mut pow = 1.0;
                for o in out.iter_mut() {
                    pow *= a2;
                    *o = ratio * pow;
                }
            }
        }
    }

    /// Whether the radial map is locally increasing at squared normalized radius `s`.
    pub fn is_monotone_at(&self, s: f64) -> bool {
        let (g, dg) = self.radial_factor(s);
        g > 0.0 && g + 2.0 * s * dg > 0.0
    }

    /// Projects a camera-frame point to a pixel.
    pub fn project(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if xc.z <= 0.0 {
            return Err(CameraError::NonPositiveDepth(xc.z));
        }
        let xn = xc.x / xc.z;
        let yn = xc.y / xc.z;
        let (g, _) = self.radial_factor(xn * xn + yn * yn);
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        Ok(Vector2::new(fx * xn * g + cx, fy * yn * g + cy))
    }

    /// Projects and returns the analytic derivatives with respect to the
    /// point and the intrinsics.
    pub fn project_with_jacobians(&self, xc: &Vector3<f64>) -> Result<Projection, CameraError> {
        if xc.z <= 0.0 {
            return Err(CameraError::NonPositiveDepth(xc.z));
        }
        let iz = 1.0 / xc.z;
        // same arithmetic as `project` so both give bit-identical pixels
        let xn = xc.x / xc.z;
        let yn = xc.y / xc.z;
        let s = xn * xn + yn * yn;
        let (g, gp) = self.radial_factor(s);
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let pixel = Vector2::new(fx * xn * g + cx, fy * yn * g + cy);

        let du_dxn = fx * (g + 2.0 * xn * xn * gp);
        let du_dyn = fx * 2.0 * xn * yn * gp;
        let dv_dxn = fy * 2.0 * xn * yn * gp;
        let dv_dyn = fy * (g + 2.0 * yn * yn * gp);
        let d_point = Matrix2x3::new(
            du_dxn * iz,
            du_dyn * iz,
            -(du_dxn * xn + du_dyn * yn) * iz,
            dv_dxn * iz,
            dv_dyn * iz,
            -(dv_dxn * xn + dv_dyn * yn) * iz,
        );

        let mut d_theta = IntrinsicsJacobian::zeros();
        match self.family {
            Family::Pinhole3 => {
                d_theta[(0, 0)] = xn;
                d_theta[(1, 0)] = yn;
                d_theta[(0, 1)] = 1.0;
                d_theta[(1, 2)] = 1.0;
            }
            _ => {
                d_theta[(0, 0)] = xn * g;
                d_theta[(1, 1)] = yn * g;
                d_theta[(0, 2)] = 1.0;
                d_theta[(1, 3)] = 1.0;
                let mut dk = [0.0; 4];
                self.radial_factor_partials(s, &mut dk);
                for (i, d) in dk.iter().take(self.family.num_distortion()).enumerate() {
                    d_theta[(0, 4 + i)] = fx * xn * d;
                    d_theta[(1, 4 + i)] = fy * yn * d;
                }
            }
        }
        Ok(Projection { pixel, d_point, d_theta })
    }

    /// Distorted radius as a function of the undistorted variable `t`
    /// (`r` for radial models, the incidence angle for fisheye) and its derivative.
    fn distorted_radius(&self, t: f64) -> (f64, f64) {
        let k = self.distortion();
        let t2 = t * t;
        let mut poly = 1.0;
        let mut dpoly = 1.0;
        let mut pow = 1.0;
        for (i, ki) in k.iter().enumerate() {
            pow *= t2;
            poly += ki * pow;
            dpoly += (2 * i + 3) as f64 * ki * pow;
        }
        (t * poly, dpoly)
    }

    /// Inverts the distorted radius `rd` for the undistorted variable `t`.
    fn invert_radius(&self, rd: f64) -> Result<f64, CameraError> {
        let k = self.distortion();
        let poly = |t: f64| {
            let t2 = t * t;
            let mut p = 1.0;
            let mut pow = 1.0;
            for ki in k {
                pow *= t2;
                p += ki * pow;
            }
            p
        };

        // fixed point on t = rd / P(t^2)
        let mut t = rd;
        let mut last_step = f64::INFINITY;
        let mut solved = None;
        for _ in 0..MAX_INVERSION_ITERS {
            let p = poly(t);
            if !(p > 0.0) {
                break;
            }
            let next = rd / p;
            let step = (next - t).abs();
            t = next;
            if step <= FIXED_POINT_TOL {
                solved = Some(t);
                break;
            }
            if step >= last_step {
                // stalled or diverging
                break;
            }
            last_step = step;
        }

        // Newton on rho(t) - rd, used as fallback and to polish the fixed point
        let mut t = solved.unwrap_or(rd);
        let mut converged = solved.is_some();
        for _ in 0..MAX_INVERSION_ITERS {
            let (rho, drho) = self.distorted_radius(t);
            if !(drho > 0.0) || !rho.is_finite() {
                return Err(CameraError::OutsideInvertibleRegion);
            }
            let step = (rho - rd) / drho;
            t -= step;
            if step.abs() <= FIXED_POINT_TOL {
                converged = true;
                break;
            }
        }
        if !converged || !t.is_finite() {
            return Err(CameraError::NoConvergence);
        }
        let (_, drho) = self.distorted_radius(t);
        if !(drho > 0.0) || t < 0.0 {
            return Err(CameraError::OutsideInvertibleRegion);
        }
        if self.family == Family::Fisheye4 && t >= std::f64::consts::FRAC_PI_2 {
            return Err(CameraError::OutsideInvertibleRegion);
        }
        Ok(t)
    }

    /// Viewing ray through a pixel.
    pub fn unproject(&self, u: &Vector2<f64>) -> Result<Ray, CameraError> {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let xd = (u.x - cx) / fx;
        let yd = (u.y - cy) / fy;
        let rd = xd.hypot(yd);
        if rd == 0.0 {
            return Ok(Ray { direction: Vector3::z() });
        }
        let (xn, yn) = match self.family {
            Family::Pinhole3 => (xd, yd),
            _ => {
                let t = self.invert_radius(rd)?;
                let r = if self.family == Family::Fisheye4 { t.tan() } else { t };
                (xd * r / rd, yd * r / rd)
            }
        };
        Ok(Ray { direction: Vector3::new(xn, yn, 1.0).normalize() })
    }
}
