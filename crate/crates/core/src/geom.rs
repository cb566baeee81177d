//! Rigid transforms, the pinhole camera model and point registration.
//!
//! Conventions: right-handed world frame with `y` pointing up, cameras look
//! down their local `+z` axis with `x` to the right and `y` down the image.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Orthonormality drift above which rotations are re-projected onto SO(3).
const REORTHO_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RigidTransformRepr", into = "RigidTransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransformRepr> for RigidTransform {
    fn from(r: RigidTransformRepr) -> Self {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform { rotation: m, translation: Vec3::from(r.translation) }
    }
}

impl From<RigidTransform> for RigidTransformRepr {
    fn from(t: RigidTransform) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = t.rotation[(i, j)];
            }
        }
        RigidTransformRepr { rotation, translation: [t.translation.x, t.translation.y, t.translation.z] }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: t }
    }

    /// Builds a transform from a rotation matrix, projecting it onto SO(3)
    /// if it has drifted.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        RigidTransform { rotation: reorthonormalize(rotation), translation }
    }

    /// Rotation of `angle` radians about the vertical (`y`) axis.
    pub fn from_yaw(angle: f64, translation: Vec3) -> Self {
        RigidTransform { rotation: yaw_matrix(angle), translation }
    }

    /// Rotation about an arbitrary unit axis (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let r = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        RigidTransform::new(r, translation)
    }

    /// Camera-style pose at `eye` looking toward `target`; the returned
    /// transform maps camera coordinates to world coordinates.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        // x right, y down, z forward is right-handed
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        RigidTransform::new(rotation, eye)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Yaw angle of the rotation about the vertical axis, in (-pi, pi].
    pub fn yaw(&self) -> f64 {
        // forward x axis projected on the ground plane
        let x = self.rotation[(0, 0)];
        let z = self.rotation[(2, 0)];
        wrap_angle(-z.atan2(x))
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Largest deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let rotation = a.rotation * b.rotation;
    let rotation = if (rotation.transpose() * rotation - Matrix3::identity()).amax() > REORTHO_THRESHOLD {
        reorthonormalize(rotation)
    } else {
        rotation
    };
    RigidTransform { rotation, translation: a.rotation * b.translation + a.translation }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform { rotation: rt, translation: -(rt * t.translation) }
}

pub fn yaw_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    // positive yaw turns +x toward -z, i.e. counter-clockwise seen from above
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Nearest rotation matrix in the Frobenius sense (polar decomposition).
pub fn reorthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Square-pixel camera with the given horizontal field of view, principal
    /// point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_radians: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov_radians / 2.0).tan();
        CameraIntrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width >= 1
            && self.height >= 1
            && self.cx.is_finite()
            && self.cy.is_finite()
    }
}

/// Pinhole projection of a camera-frame point to `(u, v, depth)`.
pub fn project(k: &CameraIntrinsics, p_cam: &Vec3) -> Result<(f64, f64, f64), GeomError> {
    if p_cam.z <= 0.0 || p_cam.z.is_nan() {
        return Err(GeomError::NonPositiveDepth(p_cam.z));
    }
    Ok((k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy, p_cam.z))
}

pub fn unproject(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vec3, GeomError> {
    if depth <= 0.0 || depth.is_nan() {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    Ok(Vec3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth))
}

/// Least-squares rigid alignment of `src` onto `dst` (Kabsch).
pub fn fit_rigid_least_squares(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::DegenerateConfiguration(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeomError::DegenerateConfiguration(format!("need at least 3 point pairs, got {}", src.len())));
    }
    let n = src.len() as f64;
    let src_mean = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let dst_mean = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;

    let mut src_scatter = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - src_mean;
        let dc = d - dst_mean;
        src_scatter += sc * sc.transpose();
        cov += dc * sc.transpose();
    }

    // collinear sources leave the rotation about their line undetermined
    let spread = src_scatter.symmetric_eigenvalues();
    let mut ev = [spread[0], spread[1], spread[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0].max(1.0) {
        return Err(GeomError::DegenerateConfiguration("source points are collinear".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform { rotation, translation })
}
