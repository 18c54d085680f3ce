//! Rigid transforms parametrized by an axis-angle rotation and a translation.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Extrinsics of one frame: maps target (world) coordinates into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Axis-angle vector in radians.
    pub rotation: Vector3<f64>,
    /// Translation in meters.
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula: rotation matrix of an axis-angle vector.
pub fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let k = skew(omega);
    let k2 = k * k;
    if theta_sq < 1e-16 {
        // second-order Taylor expansion of sin(t)/t and (1-cos t)/t^2
        return Matrix3::identity() + k * (1.0 - theta_sq / 6.0) + k2 * (0.5 - theta_sq / 24.0);
    }
    let theta = theta_sq.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta_sq;
    Matrix3::identity() + k * a + k2 * b
}

/// Right Jacobian of SO(3): `R(w + d) ~ R(w) Exp(J_r(w) d)`.
pub fn right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let k = skew(omega);
    let k2 = k * k;
    if theta_sq < 1e-12 {
        return Matrix3::identity() - k * (0.5 - theta_sq / 24.0) + k2 * (1.0 / 6.0 - theta_sq / 120.0);
    }
    let theta = theta_sq.sqrt();
    let a = (1.0 - theta.cos()) / theta_sq;
    let b = (theta - theta.sin()) / (theta_sq * theta);
    Matrix3::identity() - k * a + k2 * b
}

/// Axis-angle vector of a rotation matrix (logarithm map).
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix(r).scaled_axis()
}

impl Pose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation_log(r), translation)
    }

    /// Packs as `[rx, ry, rz, tx, ty, tz]`.
    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (&self.rotation, &self.translation);
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self::new(Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rodrigues(&self.rotation)
    }

    /// `R x + t`.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation_matrix().transpose();
        Pose::new(-self.rotation, -(rt * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.rotation_matrix();
        let r_total = r * other.rotation_matrix();
        Pose::from_rotation_matrix(&r_total, r * other.translation + self.translation)
    }
}

/// Pose with its rotation matrix cached, for evaluating many points.
#[derive(Clone, Debug)]
pub struct PreparedPose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    jr: Matrix3<f64>,
}

impl PreparedPose {
    pub fn new(pose: &Pose) -> Self {
        Self {
            r: pose.rotation_matrix(),
            t: pose.translation,
            jr: right_jacobian(&pose.rotation),
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// Camera point and its derivative with respect to the rotation vector.
    /// The derivative with respect to the translation is the identity.
    pub fn transform_with_jacobian(&self, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        // d(R x)/dw = -R [x]x J_r(w)
        let xc = self.r * x + self.t;
        (xc, -(self.r * skew(x) * self.jr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    // Independent axis-angle rotation: v cos t + (k x v) sin t + k (k.v)(1 - cos t).
    fn rodrigues_vector_oracle(omega: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
        let t = omega.norm();
        let k = omega / t;
        v * t.cos() + k.cross(v) * t.sin() + k * k.dot(v) * (1.0 - t.cos())
    }

    #[test]
    fn identity_transform() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform(&x), x);
    }

    #[test]
    fn half_turn_about_z() {
        let p = Pose::new(Vector3::new(0.0, 0.0, PI), Vector3::zeros());
        let y = p.transform(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(y, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn matches_vector_rodrigues_oracle() {
        let omega = Vector3::new(0.1, -0.2, 0.3);
        let p = Pose::new(omega, Vector3::new(0.4, 0.5, 0.6));
        let x = Vector3::new(1.0, 1.0, 1.0);
        let expected = rodrigues_vector_oracle(&omega, &x) + Vector3::new(0.4, 0.5, 0.6);
        assert_relative_eq!(p.transform(&x), expected, epsilon = 1e-14);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rodrigues(&Vector3::new(1.2, -0.7, 2.1));
        assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let pose = Pose::new(Vector3::new(0.3, -0.5, 0.8), Vector3::new(0.1, 0.2, 1.0));
        let x = Vector3::new(0.2, -0.1, 0.05);
        let (_, d) = PreparedPose::new(&pose).transform_with_jacobian(&x);
        let h = 1e-6;
        for k in 0..3 {
            let mut p = pose;
            let mut m = pose;
            p.rotation[k] += h;
            m.rotation[k] -= h;
            let fd = (p.transform(&x) - m.transform(&x)) / (2.0 * h);
            assert_relative_eq!(d.column(k).into_owned(), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_inverts_rodrigues() {
        let w = Vector3::new(-0.4, 0.9, 0.2);
        assert_relative_eq!(rotation_log(&rodrigues(&w)), w, epsilon = 1e-13);
    }
}
