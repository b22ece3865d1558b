//! Anchored inverse-depth landmarks: framed structural points (FSP) for
//! planar rectangles and framed homogeneous points (FHP) for single points.
//!
//! Both are expressed relative to an anchor camera pose `F`. A rectangle is
//! encoded by the viewing ray of its origin corner, the inverse depth along
//! that ray, its width at unit depth, its width/height form factor and its
//! orientation relative to the anchor. Projecting a corner into camera `C`:
//!
//! ```text
//! m_j = K * R_C^T * ( (F - C) + (1/omega) * R_F * (r + R_FO * s_j) )
//! ```
//!
//! where `s_j` is the corner at unit depth. Since projection is scale
//! invariant, the implementation projects the `omega`-scaled vector
//! `omega * R_C^T (F - C) + R_C^T R_F (r + R_FO s_j)`, which makes the
//! prediction from the anchor frame exactly independent of `omega`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pixel, Pose, Rotation, DEPTH_EPSILON};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("degenerate landmark parameter: {0}")]
    DegenerateParam(&'static str),
    #[error("degenerate view: {0}")]
    DegenerateView(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Corner index `j` in `1..=4`: bottom-left, bottom-right, top-right, top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StructuralPointIndex(u8);

impl StructuralPointIndex {
    pub const ALL: [StructuralPointIndex; 4] = [Self(1), Self(2), Self(3), Self(4)];

    pub fn new(j: u8) -> Option<Self> {
        (1..=4).contains(&j).then_some(Self(j))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based position in corner arrays.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<u8> for StructuralPointIndex {
    type Error = String;
    fn try_from(j: u8) -> Result<Self, Self::Error> {
        Self::new(j).ok_or_else(|| format!("corner index {j} not in 1..=4"))
    }
}

impl From<StructuralPointIndex> for u8 {
    fn from(j: StructuralPointIndex) -> u8 {
        j.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectDims {
    pub w: f64,
    pub h: f64,
}

impl RectDims {
    pub fn new(w: f64, h: f64) -> Result<Self, ParamError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(ParamError::DegenerateParam("rectangle sides must be positive"));
        }
        Ok(Self { w, h })
    }
}

/// Corners of a `w x h` rectangle in its own frame, origin at the bottom-left
/// corner, all on the `z = 0` plane.
pub fn rect_structural_points(dims: &RectDims) -> [Vector3<f64>; 4] {
    [
        Vector3::zeros(),
        Vector3::new(dims.w, 0.0, 0.0),
        Vector3::new(dims.w, dims.h, 0.0),
        Vector3::new(0.0, dims.h, 0.0),
    ]
}

/// Rectangle landmark state, 8 degrees of freedom relative to its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FspRect {
    /// Viewing ray `(u, v)` of the origin corner; the full ray is `[u, v, 1]`.
    pub ray: Vector2<f64>,
    /// Inverse depth of the origin corner (1/m).
    pub omega: f64,
    /// Width at unit depth, `w * omega`.
    pub w_bar: f64,
    /// Form factor `w / h`.
    pub form_factor: f64,
    /// Orientation of the object frame relative to the anchor frame.
    pub rel_orientation: Rotation,
}

impl FspRect {
    pub const DIM: usize = 8;

    pub fn is_valid(&self) -> bool {
        self.omega > 0.0 && self.w_bar > 0.0 && self.form_factor > 0.0
    }

    /// Tangent update `[du, dv, domega, dw_bar, df, dtheta(3)]`.
    pub fn boxplus(&self, d: &[f64]) -> FspRect {
        FspRect {
            ray: self.ray + Vector2::new(d[0], d[1]),
            omega: self.omega + d[2],
            w_bar: self.w_bar + d[3],
            form_factor: self.form_factor + d[4],
            rel_orientation: self.rel_orientation.boxplus(&Vector3::new(d[5], d[6], d[7])),
        }
    }

    fn check(&self) -> Result<(), ParamError> {
        if !(self.omega > 0.0) {
            return Err(ParamError::DegenerateParam("inverse depth must be positive"));
        }
        if !(self.form_factor > 0.0) {
            return Err(ParamError::DegenerateParam("form factor must be positive"));
        }
        Ok(())
    }

    /// Structural points scaled to unit depth: the rectangle of sides
    /// `(w_bar, w_bar / f)`.
    pub fn unit_depth_points(&self) -> [Vector3<f64>; 4] {
        let w = self.w_bar;
        let h = self.w_bar / self.form_factor;
        [
            Vector3::zeros(),
            Vector3::new(w, 0.0, 0.0),
            Vector3::new(w, h, 0.0),
            Vector3::new(0.0, h, 0.0),
        ]
    }

    pub fn ray3(&self) -> Vector3<f64> {
        Vector3::new(self.ray.x, self.ray.y, 1.0)
    }
}

/// Anchored inverse-depth point, 3 degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FhpPoint {
    pub ray: Vector2<f64>,
    pub omega: f64,
}

impl FhpPoint {
    pub const DIM: usize = 3;

    pub fn is_valid(&self) -> bool {
        self.omega > 0.0
    }

    pub fn boxplus(&self, d: &[f64]) -> FhpPoint {
        FhpPoint {
            ray: self.ray + Vector2::new(d[0], d[1]),
            omega: self.omega + d[2],
        }
    }

    pub fn ray3(&self) -> Vector3<f64> {
        Vector3::new(self.ray.x, self.ray.y, 1.0)
    }
}

pub fn fsp_dims(l: &FspRect) -> Result<RectDims, ParamError> {
    l.check()?;
    Ok(RectDims {
        w: l.w_bar / l.omega,
        h: l.w_bar / (l.form_factor * l.omega),
    })
}

pub fn fsp_origin_world(anchor: &Pose, l: &FspRect) -> Result<Vector3<f64>, ParamError> {
    if !(l.omega > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth must be positive"));
    }
    Ok(anchor.translation + anchor.rotation.rotate(&l.ray3()) / l.omega)
}

/// Orientation of the object frame in the world.
pub fn fsp_orientation_world(anchor: &Pose, l: &FspRect) -> Rotation {
    anchor.rotation.compose(&l.rel_orientation)
}

pub fn fsp_corners_world(anchor: &Pose, l: &FspRect) -> Result<[Vector3<f64>; 4], ParamError> {
    let origin = fsp_origin_world(anchor, l)?;
    let dims = fsp_dims(l)?;
    let r_wo = fsp_orientation_world(anchor, l);
    Ok(rect_structural_points(&dims).map(|s| origin + r_wo.rotate(&s)))
}

/// The `omega`-scaled camera-frame direction of corner `j` (see module docs).
pub fn fsp_scaled_camera_point(camera: &Pose, anchor: &Pose, l: &FspRect, j: StructuralPointIndex) -> Vector3<f64> {
    let s = l.unit_depth_points()[j.slot()];
    let m = l.ray3() + l.rel_orientation.rotate(&s);
    let world_dir = (anchor.translation - camera.translation) * l.omega + anchor.rotation.rotate(&m);
    camera.rotation.inverse_rotate(&world_dir)
}

pub(crate) fn check_scaled_depth(scaled: &Vector3<f64>, omega: f64) -> Result<(), GeometryError> {
    let depth = scaled.z / omega;
    if !(depth > DEPTH_EPSILON) {
        return Err(GeometryError::PointBehindCamera { depth });
    }
    Ok(())
}

pub fn fsp_project(
    k: &CameraIntrinsics,
    camera: &Pose,
    anchor: &Pose,
    l: &FspRect,
    j: StructuralPointIndex,
) -> Result<Pixel, ParamError> {
    l.check()?;
    let h = fsp_scaled_camera_point(camera, anchor, l, j);
    check_scaled_depth(&h, l.omega)?;
    Ok(k.project_camera_point(&h))
}

pub fn fhp_point_world(anchor: &Pose, p: &FhpPoint) -> Result<Vector3<f64>, ParamError> {
    if !(p.omega > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth must be positive"));
    }
    Ok(anchor.translation + anchor.rotation.rotate(&p.ray3()) / p.omega)
}

pub fn fhp_scaled_camera_point(camera: &Pose, anchor: &Pose, p: &FhpPoint) -> Vector3<f64> {
    let world_dir = (anchor.translation - camera.translation) * p.omega + anchor.rotation.rotate(&p.ray3());
    camera.rotation.inverse_rotate(&world_dir)
}

pub fn fhp_project(k: &CameraIntrinsics, camera: &Pose, anchor: &Pose, p: &FhpPoint) -> Result<Pixel, ParamError> {
    if !(p.omega > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth must be positive"));
    }
    let h = fhp_scaled_camera_point(camera, anchor, p);
    check_scaled_depth(&h, p.omega)?;
    Ok(k.project_camera_point(&h))
}

/// FHP landmark from a single pixel observed in the anchor frame.
pub fn init_fhp_from_pixel(k: &CameraIntrinsics, px: &Pixel, omega0: f64) -> Result<FhpPoint, ParamError> {
    if !(omega0 > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth seed must be positive"));
    }
    Ok(FhpPoint {
        ray: k.normalize(px),
        omega: omega0,
    })
}

/// Twice the signed area of the triangle `(a, b, c)`.
fn triangle_area2(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    (b - a).perp(&(c - a))
}

/// Homography taking the unit square `(0,0),(1,0),(1,1),(0,1)` onto four
/// image points, normalized so that `H[(2,2)] == 1`.
pub fn unit_square_homography(pts: &[Vector2<f64>; 4]) -> Option<Matrix3<f64>> {
    const SQUARE: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, ((x, y), p)) in SQUARE.iter().zip(pts).enumerate() {
        let (u, v) = (p.x, p.y);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[*x, *y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, *x, *y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Initializes a rectangle landmark from the four corner pixels of its first
/// observation. The anchor is the observing camera; `omega0` is arbitrary.
///
/// Orientation, form factor and unit-depth width come from decomposing the
/// plane homography `K^-1 H = lambda [w r1, h r2, t]`: the column norms give
/// `w/h`, `t_z` gives the unit-depth scale, and `[r1 r2 r1xr2]` is projected
/// onto SO(3).
pub fn init_fsp_from_single_view(
    k: &CameraIntrinsics,
    corners_px: &[Pixel; 4],
    omega0: f64,
) -> Result<FspRect, ParamError> {
    if !(omega0 > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth seed must be positive"));
    }
    let pts = corners_px.map(|p| p.to_vector());
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(ParamError::DegenerateView("coincident corners"));
    }
    for (a, b, c) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        if triangle_area2(&pts[a], &pts[b], &pts[c]).abs() <= 1e-9 * scale * scale {
            return Err(ParamError::DegenerateView("three corners are collinear"));
        }
    }
    let h = unit_square_homography(&pts).ok_or(ParamError::DegenerateView("rank-deficient homography"))?;
    let k_inv = k
        .matrix()
        .try_inverse()
        .ok_or(ParamError::DegenerateView("singular intrinsics"))?;
    let mut m = k_inv * h;
    if m[(2, 2)] < 0.0 {
        m = -m;
    }
    let h1 = m.column(0).into_owned();
    let h2 = m.column(1).into_owned();
    let t = m.column(2).into_owned();
    let (n1, n2) = (h1.norm(), h2.norm());
    if !(n1 > 0.0 && n2 > 0.0 && t.z > 0.0) {
        return Err(ParamError::DegenerateView("rank-deficient homography"));
    }
    let r1 = h1 / n1;
    let r2 = h2 / n2;
    let r3 = r1.cross(&r2);
    if r3.norm() < 1e-9 {
        return Err(ParamError::DegenerateView("rank-deficient homography"));
    }
    let rel_orientation = Rotation::from_matrix(&Matrix3::from_columns(&[r1, r2, r3]));
    let l = FspRect {
        ray: k.normalize(&corners_px[0]),
        omega: omega0,
        w_bar: n1 / t.z,
        form_factor: n1 / n2,
        rel_orientation,
    };
    // Every corner must be in front of the anchor camera.
    for s in l.unit_depth_points() {
        let p = l.ray3() + l.rel_orientation.rotate(&s);
        if p.z <= DEPTH_EPSILON {
            return Err(ParamError::DegenerateView("rectangle behind the camera"));
        }
    }
    Ok(l)
}
