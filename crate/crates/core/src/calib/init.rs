//! Closed-form starting values: plane homographies, Zhang's intrinsics
//! estimate and pose recovery from a homography.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::dataset::Dataset;
use crate::camera::{rodrigues, CameraModel, Family, Pose};
use crate::error::{Error, Result};
use crate::stats;

/// Normalizing similarity: centroid to the origin, mean distance `sqrt(2)`.
fn normalizer(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if d > 0.0 { std::f64::consts::SQRT_2 / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Whether normalized points spread in two directions: the smaller
/// eigenvalue of their scatter must not vanish relative to the larger.
fn spans_plane(pts: &[Vector2<f64>]) -> bool {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let m = pts.iter().fold(nalgebra::Matrix2::zeros(), |a, p| a + (p - c) * (p - c).transpose()) / n;
    let (tr, det) = (m.trace(), m.determinant());
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (lo, hi) = (0.5 * tr - disc, 0.5 * tr + disc);
    hi > 0.0 && lo > 1e-6 * hi
}

/// Right singular vector of the smallest singular value.
fn null_vector(a: DMatrix<f64>) -> Option<Vec<f64>> {
    let n = a.ncols();
    let a = if a.nrows() < n { a.clone().resize_vertically(n, 0.0) } else { a };
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let k = (0..n).min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))?;
    Some(vt.row(k).iter().copied().collect())
}

/// Homography mapping `src` to `dst` by the normalized direct linear transform.
/// Returns `None` for fewer than 4 points or (near-)collinear configurations.
pub fn estimate_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let ns: Vec<Vector2<f64>> = src.iter().map(|p| apply(&ts, p)).collect();
    let nd: Vec<Vector2<f64>> = dst.iter().map(|p| apply(&td, p)).collect();
    if !spans_plane(&ns) || !spans_plane(&nd) {
        return None;
    }
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in ns.iter().zip(&nd).enumerate() {
        let row = [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x];
        let row2 = [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y];
        for j in 0..9 {
            a[(2 * i, j)] = row[j];
            a[(2 * i + 1, j)] = row2[j];
        }
    }
    let h = null_vector(a)?;
    let hn = Matrix3::from_row_slice(&h);
    let h = td.try_inverse()? * hn * ts;
    if h.iter().any(|v| !v.is_finite()) || h.norm() == 0.0 {
        return None;
    }
    Some(h / h.norm())
}

/// Pose of a planar target whose homography into normalized image
/// coordinates is `h`. The overall sign is chosen so that most of the
/// target `points` lie in front of the camera (the target origin if empty).
pub fn pose_from_homography(h: &Matrix3<f64>, points: &[Vector2<f64>]) -> Option<Pose> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let scale = 2.0 / (h1.norm() + h2.norm());
    if !scale.is_finite() {
        return None;
    }
    let mut r1 = h1 * scale;
    let mut r2 = h2 * scale;
    let mut t = h3 * scale;
    let depth = |p: &Vector2<f64>| r1.z * p.x + r2.z * p.y + t.z;
    let behind = if points.is_empty() { usize::from(t.z < 0.0) } else { points.iter().filter(|p| depth(p) < 0.0).count() };
    if 2 * behind > points.len().max(1) {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    let r3 = r1.cross(&r2);
    let m = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    Some(Pose::from_rotation_matrix(&r, t))
}

fn zhang_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Zero-skew pinhole `(fx, fy, cx, cy)` from homographies expressed in a
/// normalized pixel frame. `None` if the estimate is not a valid camera.
fn zhang_intrinsics(hs: &[Matrix3<f64>]) -> Option<[f64; 4]> {
    let mut a = DMatrix::zeros(2 * hs.len() + 1, 6);
    for (k, h) in hs.iter().enumerate() {
        let v12 = zhang_row(h, 0, 1);
        let v11 = zhang_row(h, 0, 0);
        let v22 = zhang_row(h, 1, 1);
        for j in 0..6 {
            a[(2 * k, j)] = v12[j];
            a[(2 * k + 1, j)] = v11[j] - v22[j];
        }
    }
    // zero skew: B12 = 0
    a[(2 * hs.len(), 1)] = 1.0;
    let b = null_vector(a)?;
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let alpha_sq = lambda / b11;
    let beta_sq = lambda * b11 / den;
    if !(alpha_sq > 0.0 && beta_sq > 0.0) {
        return None;
    }
    let alpha = alpha_sq.sqrt();
    let beta = beta_sq.sqrt();
    let u0 = -b13 * alpha_sq / lambda;
    let out = [alpha, beta, u0, v0];
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Focal lengths for a principal point fixed at the origin of the normalized
/// pixel frame.
fn focal_with_known_center(hs: &[Matrix3<f64>]) -> Option<(f64, f64)> {
    let mut a = DMatrix::zeros(2 * hs.len(), 3);
    for (k, h) in hs.iter().enumerate() {
        let v12 = zhang_row(h, 0, 1);
        let v11 = zhang_row(h, 0, 0);
        let v22 = zhang_row(h, 1, 1);
        for (j, c) in [0, 2, 5].into_iter().enumerate() {
            a[(2 * k, j)] = v12[c];
            a[(2 * k + 1, j)] = v11[c] - v22[c];
        }
    }
    let b = null_vector(a)?;
    let fx_sq = b[2] / b[0];
    let fy_sq = b[2] / b[1];
    if fx_sq > 0.0 && fy_sq > 0.0 {
        Some((fx_sq.sqrt(), fy_sq.sqrt()))
    } else if fx_sq > 0.0 || fy_sq > 0.0 {
        let f = fx_sq.max(fy_sq).sqrt();
        Some((f, f))
    } else {
        None
    }
}

fn frame_points(dataset: &Dataset, frame: usize) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let f = &dataset.frames[frame];
    let src = f
        .obs
        .iter()
        .map(|o| {
            let x = dataset.target.corner(o.corner);
            Vector2::new(x.x, x.y)
        })
        .collect();
    let dst = f.obs.iter().map(|o| Vector2::new(o.u, o.v)).collect();
    (src, dst)
}

/// Median of the single-focal estimates each homography constraint gives
/// for a principal point at the origin. Survives inconsistent constraints
/// (e.g. from distorted data) that defeat the joint solution.
fn focal_median(hs: &[Matrix3<f64>]) -> Option<f64> {
    let mut est = Vec::new();
    for h in hs {
        let (a, b) = (h.column(0), h.column(1));
        let num = -(a[0] * b[0] + a[1] * b[1]);
        let den = a[2] * b[2];
        est.push(num / den);
        let num = -(a[0] * a[0] + a[1] * a[1] - b[0] * b[0] - b[1] * b[1]);
        let den = a[2] * a[2] - b[2] * b[2];
        est.push(num / den);
    }
    let pos: Vec<f64> = est.into_iter().filter(|f2| f2.is_finite() && *f2 > 0.0).collect();
    (!pos.is_empty()).then(|| stats::median(&pos).sqrt())
}

/// Candidate pinhole starting cameras from plane homographies: the
/// zero-skew closed form (if plausible) and estimates with the principal
/// point fixed at the image center. Distortion starts at zero.
pub fn initial_cameras(dataset: &Dataset, family: Family) -> Result<Vec<CameraModel>> {
    if dataset.num_frames() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "closed-form initialization needs at least 3 frames, got {}",
            dataset.num_frames()
        )));
    }
    let all: Vec<Vector2<f64>> = dataset.frames.iter().flat_map(|f| f.obs.iter().map(|o| Vector2::new(o.u, o.v))).collect();
    let (center, scale) = match dataset.image_size {
        Some([w, h]) => (Vector2::new(0.5 * w as f64, 0.5 * h as f64), 0.5 * (w.max(h)) as f64),
        None => {
            let c = all.iter().fold(Vector2::zeros(), |a, p| a + p) / all.len().max(1) as f64;
            let s = all.iter().map(|p| (p - c).abs().max()).fold(1.0, f64::max);
            (c, s)
        }
    };
    // normalized pixel frame: center at the origin, unit half-size
    let npix = Matrix3::new(1.0 / scale, 0.0, -center.x / scale, 0.0, 1.0 / scale, -center.y / scale, 0.0, 0.0, 1.0);
    let hs: Vec<Matrix3<f64>> = (0..dataset.num_frames())
        .filter_map(|j| {
            let (src, dst) = frame_points(dataset, j);
            estimate_homography(&src, &dst).map(|h| npix * h)
        })
        .collect();
    if hs.len() < 2 {
        return Err(Error::DegenerateConfiguration("fewer than two usable homographies".into()));
    }
    let plausible = |k: &[f64; 4]| k[0] > 0.05 && k[1] > 0.05 && k[0] / k[1] < 3.0 && k[1] / k[0] < 3.0 && k[2].abs() < 1.0 && k[3].abs() < 1.0;
    let mut ks = Vec::new();
    ks.extend(zhang_intrinsics(&hs).filter(plausible));
    ks.extend(focal_with_known_center(&hs).map(|(fx, fy)| [fx, fy, 0.0, 0.0]).filter(plausible));
    ks.extend(focal_median(&hs).map(|f| [f, f, 0.0, 0.0]).filter(plausible));
    if ks.is_empty() {
        return Err(Error::DegenerateConfiguration("homographies do not constrain the focal length".into()));
    }
    ks.into_iter()
        .map(|k| Ok(CameraModel::from_pinhole(family, k[0] * scale, k[1] * scale, k[2] * scale + center.x, k[3] * scale + center.y)?))
        .collect()
}

/// Closed-form initialization: the first candidate of [`initial_cameras`]
/// and the poses it implies.
pub fn initialize(dataset: &Dataset, family: Family) -> Result<(CameraModel, Vec<Pose>)> {
    let cam = initial_cameras(dataset, family)?.swap_remove(0);
    let poses = initialize_poses(dataset, &cam)?;
    Ok((cam, poses))
}

/// Pose of frame `j` given known intrinsics: observations are unprojected to
/// normalized coordinates and the frame's homography is decomposed.
fn frame_pose(dataset: &Dataset, j: usize, cam: &CameraModel) -> Result<Pose> {
    let (src, px) = frame_points(dataset, j);
    let dst = px
        .iter()
        .map(|u| cam.unproject(u).map(|r| r.at_unit_depth().xy()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut pose = estimate_homography(&src, &dst)
        .and_then(|h| pose_from_homography(&h, &src))
        .ok_or_else(|| Error::DegenerateConfiguration(format!("frame {}: homography is degenerate", dataset.frames[j].id)))?;
    // with uncorrected distortion a steeply tilted board can get corners
    // behind the camera; move it back so every corner can be projected
    let r = pose.rotation_matrix();
    let min_z = src.iter().map(|p| (r * Vector3::new(p.x, p.y, 0.0) + pose.translation).z).fold(f64::INFINITY, f64::min);
    if min_z <= 0.0 {
        pose.translation.z += 0.1 * pose.translation.norm().max(1e-3) - min_z;
    }
    // few or clustered corners leave the planar pose ambiguous: refine both
    // branches with the camera fixed and keep the better fit
    let frame = &dataset.frames[j];
    let points: Vec<Vector3<f64>> = frame.obs.iter().map(|o| dataset.target.corner(o.corner)).collect();
    let best = [pose, mirrored_pose(&pose, &points)]
        .iter()
        .filter_map(|p0| super::pose_only_refit(cam, &dataset.target, &frame.obs, p0).ok())
        .min_by(|a, b| a.1.norm_squared().total_cmp(&b.1.norm_squared()));
    Ok(best.map_or(pose, |b| b.0))
}

/// The other branch of the planar pose ambiguity: the plane normal mirrored
/// about the line of sight through the centroid of `points`, which stays put.
pub fn mirrored_pose(pose: &Pose, points: &[Vector3<f64>]) -> Pose {
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len().max(1) as f64;
    let r = pose.rotation_matrix();
    let c_cam = pose.transform(&c);
    let v = c_cam.normalize();
    let n = r.column(2).into_owned();
    let n2 = 2.0 * n.dot(&v) * v - n;
    let axis = n.cross(&n2);
    let q = if axis.norm() > 1e-12 { rodrigues(&(axis.normalize() * axis.norm().atan2(n.dot(&n2)))) } else { Matrix3::identity() };
    let r2 = q * r;
    Pose::from_rotation_matrix(&r2, c_cam - r2 * c)
}

/// Poses of every frame given known intrinsics.
pub fn initialize_poses(dataset: &Dataset, cam: &CameraModel) -> Result<Vec<Pose>> {
    (0..dataset.num_frames()).map(|j| frame_pose(dataset, j, cam)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::dataset::{Frame, Observation, TargetGeometry};
    use approx::assert_relative_eq;

    fn synthetic(cam: &CameraModel, poses: &[Pose]) -> Dataset {
        let target = TargetGeometry::new(6, 8, 0.05);
        let frames = poses
            .iter()
            .enumerate()
            .map(|(j, p)| Frame {
                id: j as i64,
                obs: (0..target.num_corners())
                    .map(|c| {
                        let u = cam.project(&p.transform(&target.corner(c))).unwrap();
                        Observation { corner: c, u: u.x, v: u.y }
                    })
                    .collect(),
            })
            .collect();
        Dataset { target, frames, image_size: Some([1280, 960]) }
    }

    fn poses() -> Vec<Pose> {
        vec![
            Pose::new(Vector3::new(0.0, 0.0, 0.05), Vector3::new(-0.15, -0.1, 0.8)),
            Pose::new(Vector3::new(0.4, 0.1, 0.0), Vector3::new(-0.2, -0.1, 1.0)),
            Pose::new(Vector3::new(-0.1, 0.5, 0.2), Vector3::new(-0.1, -0.15, 0.9)),
        ]
    }

    #[test]
    fn homography_of_exact_points() {
        let h = Matrix3::new(1.2, 0.1, 3.0, -0.2, 0.9, 1.0, 0.01, 0.02, 1.0);
        let src: Vec<Vector2<f64>> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.3)].iter().map(|&(x, y)| Vector2::new(x, y)).collect();
        let dst: Vec<Vector2<f64>> = src.iter().map(|p| apply(&h, p)).collect();
        let est = estimate_homography(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            assert_relative_eq!(apply(&est, s), *d, epsilon = 1e-10);
        }
    }

    #[test]
    fn collinear_points_are_rejected() {
        let src: Vec<Vector2<f64>> = (0..5).map(|i| Vector2::new(i as f64, 0.0)).collect();
        assert!(estimate_homography(&src, &src).is_none());
    }

    #[test]
    fn recovers_pinhole_focal() {
        let cam = CameraModel::new(Family::PinholeRadial(2), vec![800.0, 790.0, 640.0, 480.0, 0.0, 0.0]).unwrap();
        let ps = poses();
        let (est, est_poses) = initialize(&synthetic(&cam, &ps), Family::PinholeRadial(2)).unwrap();
        assert!((est.focal().0 - 800.0).abs() < 0.05 * 800.0);
        assert!((est.focal().1 - 790.0).abs() < 0.05 * 790.0);
        for (a, b) in est_poses.iter().zip(&ps) {
            assert!((a.translation - b.translation).norm() < 0.05);
        }
    }

    #[test]
    fn too_few_frames() {
        let cam = CameraModel::new(Family::Pinhole3, vec![800.0, 640.0, 480.0]).unwrap();
        let d = synthetic(&cam, &poses()[..2]);
        assert!(matches!(initialize(&d, Family::Pinhole3), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn poses_with_known_camera() {
        let cam = CameraModel::new(Family::PinholeRadial(2), vec![800.0, 790.0, 640.0, 480.0, -0.2, 0.05]).unwrap();
        let ps = poses();
        let est = initialize_poses(&synthetic(&cam, &ps), &cam).unwrap();
        for (a, b) in est.iter().zip(&ps) {
            assert_relative_eq!(a.translation, b.translation, epsilon = 1e-8);
            assert_relative_eq!(a.rotation, b.rotation, epsilon = 1e-8);
        }
    }
}
