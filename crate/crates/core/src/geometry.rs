//! SO(3)/SE(3) primitives and the pinhole camera.
//!
//! Rotations are unit quaternions. Optimizer increments use right
//! perturbation, `R <- R * exp(delta)`, and translations are updated
//! additively in the world frame.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum camera-frame depth (meters) for a point to be projectable.
pub const DEPTH_EPSILON: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:e} m)")]
    PointBehindCamera { depth: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    /// Builds a rotation from `[w, x, y, z]`, normalizing the input.
    /// Returns `None` for a (near) zero quaternion.
    pub fn from_wxyz(q: [f64; 4]) -> Option<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = raw.norm();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        // Leave stored unit quaternions bit-exact.
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Some(Self(UnitQuaternion::new_unchecked(raw)));
        }
        Some(Self(UnitQuaternion::new_unchecked(raw / n)))
    }

    /// Nearest rotation to an arbitrary 3x3 matrix (polar factor with det +1).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u_flip = u;
            u_flip.column_mut(2).neg_mut();
            r = u_flip * v_t;
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
        Self(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn to_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self(renormalize(self.0 * other.0))
    }

    /// Right-perturbation update `self * exp(delta)`.
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Rotation {
        self.compose(&so3_exp(delta))
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        so3_log(self).norm()
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let raw = q.into_inner();
    UnitQuaternion::new_unchecked(raw / raw.norm())
}

/// Exponential map so(3) -> SO(3) (Rodrigues, Taylor branch near zero).
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        // sin(t/2)/t ~ 1/2 - t^2/48
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let q = Quaternion::new(w, s * omega.x, s * omega.y, s * omega.z);
    Rotation(UnitQuaternion::new_unchecked(q / q.norm()))
}

/// Logarithm map SO(3) -> so(3), returning a rotation vector with norm in `[0, pi]`.
///
/// At exactly `pi` the axis is chosen with its first nonzero component positive.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let q = r.0.quaternion();
    let (mut w, mut v) = (q.w, Vector3::new(q.i, q.j, q.k));
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < SMALL_ANGLE {
        // theta = 2 atan(s/w) ~ 2 s / w
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let theta = 2.0 * s.atan2(w);
    let mut axis = v / s;
    if w == 0.0 {
        let first = axis.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0);
        if first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Right Jacobian of SO(3).
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Rigid transform taking body-frame vectors to the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: Rotation,
}

impl Pose {
    pub fn new(translation: Vector3<f64>, rotation: Rotation) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(t, Rotation::identity())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation.rotate(&other.translation),
            rotation: self.rotation.compose(&other.rotation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            translation: -r_inv.rotate(&self.translation),
            rotation: r_inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// World point expressed in this frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_rotate(&(p - self.translation))
    }

    /// Manifold update with a 6-vector `[dt; dtheta]`.
    pub fn boxplus(&self, delta: &[f64]) -> Pose {
        let dt = Vector3::new(delta[0], delta[1], delta[2]);
        let dr = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            translation: self.translation + dt,
            rotation: self.rotation.boxplus(&dr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps a pixel to normalized image coordinates `(x/z, y/z)`.
    pub fn normalize(&self, px: &Pixel) -> Vector2<f64> {
        Vector2::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Perspective division of a camera-frame direction. The caller checks depth.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Pixel {
        Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Derivative of [`Self::project_camera_point`] with respect to `p`.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }
}

/// A projected pixel together with its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    pub depth: f64,
}

/// Projects a world point through a camera with pose `camera` (camera-to-world).
pub fn project(k: &CameraIntrinsics, camera: &Pose, p_world: &Vector3<f64>) -> Result<Projection, GeometryError> {
    let pc = camera.inverse_transform_point(p_world);
    if pc.z <= DEPTH_EPSILON {
        return Err(GeometryError::PointBehindCamera { depth: pc.z });
    }
    Ok(Projection {
        pixel: k.project_camera_point(&pc),
        depth: pc.z,
    })
}
