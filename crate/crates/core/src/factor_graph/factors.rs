//! Residuals and analytic Jacobians for every factor kind.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Vector3};

use super::{Factor, Variable, VariableId};
use crate::geometry::{hat, so3_log, so3_right_jacobian_inv, CameraIntrinsics, Pixel, Pose};
use crate::imu::{imu_ternary_residual, ternary_linearize, ImuBias};
use crate::parameterization::{FhpPoint, FspRect, ParamError};

pub const DEFAULT_NUMERICAL_STEP: f64 = 1e-6;

/// Residual and Jacobian blocks with duplicate variables merged.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub variables: Vec<VariableId>,
    pub jacobians: Vec<DMatrix<f64>>,
}

fn pose(values: &[Variable], id: VariableId) -> &Pose {
    match &values[id.index()] {
        Variable::Pose(p) => p,
        v => panic!("variable {id:?} holds {:?}, not a pose", v.kind()),
    }
}

fn bias(values: &[Variable], id: VariableId) -> &ImuBias {
    match &values[id.index()] {
        Variable::Bias(b) => b,
        v => panic!("variable {id:?} holds {:?}, not a bias", v.kind()),
    }
}

fn fsp(values: &[Variable], id: VariableId) -> &FspRect {
    match &values[id.index()] {
        Variable::Fsp(l) => l,
        v => panic!("variable {id:?} holds {:?}, not an FSP landmark", v.kind()),
    }
}

fn fhp(values: &[Variable], id: VariableId) -> &FhpPoint {
    match &values[id.index()] {
        Variable::Fhp(l) => l,
        v => panic!("variable {id:?} holds {:?}, not an FHP landmark", v.kind()),
    }
}

fn check_depth(h: &Vector3<f64>, omega: f64) -> Result<(), ParamError> {
    if !(omega > 0.0) {
        return Err(ParamError::DegenerateParam("inverse depth must be positive"));
    }
    crate::parameterization::check_scaled_depth(h, omega)?;
    Ok(())
}

/// Shared projection model of both landmark types: the scaled camera point
/// `h = omega R_c^T (t_a - t_c) + R_c^T R_a m` where `m` is the anchor-frame
/// direction of the point at unit depth.
struct AnchoredPoint<'a> {
    camera: &'a Pose,
    anchor: &'a Pose,
    omega: f64,
    m: Vector3<f64>,
}

impl AnchoredPoint<'_> {
    fn h(&self) -> Vector3<f64> {
        let world_dir =
            (self.anchor.translation - self.camera.translation) * self.omega + self.anchor.rotation.rotate(&self.m);
        self.camera.rotation.inverse_rotate(&world_dir)
    }

    /// `dh/d camera` and `dh/d anchor` as 3x6 blocks.
    fn pose_jacobians(&self, h: &Vector3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let rct = self.camera.rotation.matrix().transpose();
        let rcr = rct * self.anchor.rotation.matrix();
        let mut jc = DMatrix::zeros(3, 6);
        jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-self.omega * rct));
        jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(h));
        let mut ja = DMatrix::zeros(3, 6);
        ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.omega * rct));
        ja.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rcr * hat(&self.m)));
        (jc, ja)
    }

    /// `dh/d omega`.
    fn omega_column(&self) -> Vector3<f64> {
        self.camera
            .rotation
            .inverse_rotate(&(self.anchor.translation - self.camera.translation))
    }

    /// Maps an anchor-frame direction change to `dh`.
    fn direction_map(&self) -> Matrix3<f64> {
        self.camera.rotation.matrix().transpose() * self.anchor.rotation.matrix()
    }
}

fn pixel_residual(observed: &Pixel, k: &CameraIntrinsics, h: &Vector3<f64>) -> [f64; 2] {
    let p = k.project_camera_point(h);
    [observed.u - p.u, observed.v - p.v]
}

fn dyn_block(m: &Matrix2x3<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
    let md = DMatrix::from_column_slice(2, 3, m.as_slice());
    -(md * j)
}

fn fsp_point<'a>(camera: &'a Pose, anchor: &'a Pose, l: &FspRect, j: usize) -> AnchoredPoint<'a> {
    let s = l.unit_depth_points()[j];
    AnchoredPoint {
        camera,
        anchor,
        omega: l.omega,
        m: l.ray3() + l.rel_orientation.rotate(&s),
    }
}

fn fhp_point<'a>(camera: &'a Pose, anchor: &'a Pose, l: &FhpPoint) -> AnchoredPoint<'a> {
    AnchoredPoint {
        camera,
        anchor,
        omega: l.omega,
        m: l.ray3(),
    }
}

fn evaluate(
    factor: &Factor,
    values: &[Variable],
    with_jacobian: bool,
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), ParamError> {
    match factor {
        Factor::FspReprojection {
            camera,
            anchor,
            landmark,
            intrinsics,
            observed,
            ..
        } => {
            let (cam, anc, l) = (pose(values, *camera), pose(values, *anchor), fsp(values, *landmark));
            if !l.is_valid() {
                return Err(ParamError::DegenerateParam("rectangle parameters must be positive"));
            }
            let mut r = DVector::zeros(8);
            let mut jacs = if with_jacobian {
                vec![DMatrix::zeros(8, 6), DMatrix::zeros(8, 6), DMatrix::zeros(8, 8)]
            } else {
                Vec::new()
            };
            let r_fo = l.rel_orientation.matrix();
            let unit = l.unit_depth_points();
            for j in 0..4 {
                let pt = fsp_point(cam, anc, l, j);
                let h = pt.h();
                check_depth(&h, l.omega)?;
                let e = pixel_residual(&observed[j], intrinsics, &h);
                r[2 * j] = e[0];
                r[2 * j + 1] = e[1];
                if !with_jacobian {
                    continue;
                }
                let proj = intrinsics.projection_jacobian(&h);
                let (jc, ja) = pt.pose_jacobians(&h);
                jacs[0].view_mut((2 * j, 0), (2, 6)).copy_from(&dyn_block(&proj, &jc));
                jacs[1].view_mut((2 * j, 0), (2, 6)).copy_from(&dyn_block(&proj, &ja));

                let dmap = pt.direction_map();
                let dmap_fo = dmap * r_fo;
                let (a, b) = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)][j];
                let f = l.form_factor;
                let mut jl = DMatrix::zeros(3, 8);
                jl.fixed_view_mut::<3, 1>(0, 0).copy_from(&dmap.column(0));
                jl.fixed_view_mut::<3, 1>(0, 1).copy_from(&dmap.column(1));
                jl.fixed_view_mut::<3, 1>(0, 2).copy_from(&pt.omega_column());
                jl.fixed_view_mut::<3, 1>(0, 3)
                    .copy_from(&(dmap_fo * Vector3::new(a, b / f, 0.0)));
                jl.fixed_view_mut::<3, 1>(0, 4)
                    .copy_from(&(dmap_fo * Vector3::new(0.0, -b * l.w_bar / (f * f), 0.0)));
                jl.fixed_view_mut::<3, 3>(0, 5).copy_from(&(-dmap_fo * hat(&unit[j])));
                jacs[2].view_mut((2 * j, 0), (2, 8)).copy_from(&dyn_block(&proj, &jl));
            }
            Ok((r, jacs))
        }
        Factor::FhpReprojection {
            camera,
            anchor,
            landmark,
            intrinsics,
            observed,
            ..
        } => {
            let (cam, anc, l) = (pose(values, *camera), pose(values, *anchor), fhp(values, *landmark));
            let pt = fhp_point(cam, anc, l);
            let h = pt.h();
            check_depth(&h, l.omega)?;
            let e = pixel_residual(observed, intrinsics, &h);
            let r = DVector::from_column_slice(&e);
            if !with_jacobian {
                return Ok((r, Vec::new()));
            }
            let proj = intrinsics.projection_jacobian(&h);
            let (jc, ja) = pt.pose_jacobians(&h);
            let dmap = pt.direction_map();
            let mut jl = DMatrix::zeros(3, 3);
            jl.fixed_view_mut::<3, 1>(0, 0).copy_from(&dmap.column(0));
            jl.fixed_view_mut::<3, 1>(0, 1).copy_from(&dmap.column(1));
            jl.fixed_view_mut::<3, 1>(0, 2).copy_from(&pt.omega_column());
            Ok((
                r,
                vec![dyn_block(&proj, &jc), dyn_block(&proj, &ja), dyn_block(&proj, &jl)],
            ))
        }
        Factor::ImuTernary {
            poses,
            bias: b,
            pre1,
            pre2,
            gravity,
            ..
        } => {
            let ps = [pose(values, poses[0]), pose(values, poses[1]), pose(values, poses[2])];
            let lin = ternary_linearize(ps, pre1, pre2, bias(values, *b), gravity)
                .map_err(|_| ParamError::DegenerateParam("degenerate IMU interval"))?;
            let r = DVector::from_column_slice(lin.residual.as_slice());
            let jacs = if with_jacobian {
                lin.jacobians
                    .iter()
                    .map(|j| DMatrix::from_column_slice(9, 6, j.as_slice()))
                    .collect()
            } else {
                Vec::new()
            };
            Ok((r, jacs))
        }
        Factor::BiasWalk { from, to, .. } => {
            let d = bias(values, *to).to_vector() - bias(values, *from).to_vector();
            let r = DVector::from_column_slice(d.as_slice());
            let jacs = if with_jacobian {
                vec![-DMatrix::identity(6, 6), DMatrix::identity(6, 6)]
            } else {
                Vec::new()
            };
            Ok((r, jacs))
        }
        Factor::PosePrior { pose: id, prior, .. } => {
            let p = pose(values, *id);
            let dt = p.translation - prior.translation;
            let dr = so3_log(&prior.rotation.inverse().compose(&p.rotation));
            let r = DVector::from_iterator(6, dt.iter().chain(dr.iter()).copied());
            let jacs = if with_jacobian {
                let mut j = Matrix6::identity();
                j.fixed_view_mut::<3, 3>(3, 3).copy_from(&so3_right_jacobian_inv(&dr));
                vec![DMatrix::from_column_slice(6, 6, j.as_slice())]
            } else {
                Vec::new()
            };
            Ok((r, jacs))
        }
    }
}

/// Residual in the factor's own convention: observed minus predicted for
/// reprojections; the local-frame inertial residual for IMU factors.
pub(super) fn residual(factor: &Factor, values: &[Variable]) -> Result<DVector<f64>, ParamError> {
    evaluate(factor, values, false).map(|(r, _)| r)
}

pub(super) fn linearize(factor: &Factor, values: &[Variable]) -> Result<Linearization, ParamError> {
    let (residual, blocks) = evaluate(factor, values, true)?;
    let mut variables: Vec<VariableId> = Vec::with_capacity(blocks.len());
    let mut jacobians: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
    for (id, j) in factor.variables().into_iter().zip(blocks) {
        match variables.iter().position(|v| *v == id) {
            Some(k) => jacobians[k] += j,
            None => {
                variables.push(id);
                jacobians.push(j);
            }
        }
    }
    Ok(Linearization {
        residual,
        variables,
        jacobians,
    })
}

/// Central differences through each variable's boxplus, one block per
/// distinct variable in [`Factor::variables`] order.
pub(super) fn numerical_jacobian(
    factor: &Factor,
    values: &[Variable],
    step: f64,
) -> Result<Vec<DMatrix<f64>>, ParamError> {
    let mut ids = factor.variables();
    let mut seen = Vec::new();
    ids.retain(|id| {
        let fresh = !seen.contains(id);
        seen.push(*id);
        fresh
    });
    let m = factor.residual_dim();
    let mut out = Vec::with_capacity(ids.len());
    let mut work = values.to_vec();
    for id in &ids {
        let dim = id.kind().dim();
        let mut jac = DMatrix::zeros(m, dim);
        let base = values[id.index()];
        for c in 0..dim {
            let mut d = vec![0.0; dim];
            d[c] = step;
            work[id.index()] = base.boxplus(&d);
            let rp = residual(factor, &work)?;
            d[c] = -step;
            work[id.index()] = base.boxplus(&d);
            let rm = residual(factor, &work)?;
            jac.set_column(c, &((rp - rm) / (2.0 * step)));
        }
        work[id.index()] = base;
        out.push(jac);
    }
    Ok(out)
}

/// World-frame inertial residual of an IMU factor; `None` for other kinds.
pub(super) fn imu_world_residual(factor: &Factor, values: &[Variable]) -> Option<DVector<f64>> {
    let Factor::ImuTernary {
        poses,
        bias: b,
        pre1,
        pre2,
        gravity,
        ..
    } = factor
    else {
        return None;
    };
    let r = imu_ternary_residual(
        pose(values, poses[0]),
        pose(values, poses[1]),
        pose(values, poses[2]),
        pre1,
        pre2,
        bias(values, *b),
        gravity,
    )
    .ok()?;
    Some(DVector::from_column_slice(r.as_slice()))
}
