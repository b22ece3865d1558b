//! IMU preintegration and the ternary inertial constraint.
//!
//! Samples between two keyframes are compounded into a relative motion
//! `(dP, dV, dR)` expressed in the body frame of the first keyframe, with
//! gravity removed. Three consecutive keyframes are tied together by
//! eliminating the two unknown velocities, so no velocity state exists.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hat, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Pose, Rotation};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Gravity in the world frame (m/s^2), z up.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

const BIAS_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("IMU buffer needs at least two samples, got {0}")]
    EmptyBuffer(usize),
    #[error("IMU timestamps are not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("preintegration interval must be positive (dt1={0}, dt2={1})")]
    DegenerateInterval(f64, f64),
    #[error("preintegrated covariance is singular; IMU noise sigmas must be positive")]
    SingularCovariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame (m/s^2).
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame (rad/s).
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub const DIM: usize = 6;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn boxplus(&self, d: &[f64]) -> Self {
        Self {
            accel: self.accel + Vector3::new(d[0], d[1], d[2]),
            gyro: self.gyro + Vector3::new(d[3], d[4], d[5]),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, 6> {
        SVector::<f64, 6>::from_iterator(self.accel.iter().chain(self.gyro.iter()).copied())
    }
}

/// Per-sample (discrete) noise standard deviations used for covariance propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    pub sigma_accel: f64,
    pub sigma_gyro: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            sigma_accel: 0.02,
            sigma_gyro: 0.002,
        }
    }
}

/// First-order sensitivities of the preintegrated deltas to the biases.
/// The rotation Jacobian is in the right-perturbation tangent space of `dR`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasJacobians {
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dr_dbg: Matrix3<f64>,
}

/// Relative motion between two keyframes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionDelta {
    pub dt: f64,
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dr: Rotation,
}

impl MotionDelta {
    pub fn identity() -> Self {
        Self {
            dt: 0.0,
            dp: Vector3::zeros(),
            dv: Vector3::zeros(),
            dr: Rotation::identity(),
        }
    }

    /// Delta over `[t0, t2]` from deltas over `[t0, t1]` and `[t1, t2]`.
    pub fn compose(&self, next: &MotionDelta) -> MotionDelta {
        MotionDelta {
            dt: self.dt + next.dt,
            dp: self.dp + self.dv * next.dt + self.dr.rotate(&next.dp),
            dv: self.dv + self.dr.rotate(&next.dv),
            dr: self.dr.compose(&next.dr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preintegrated {
    pub dt: f64,
    pub delta_p: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_r: Rotation,
    /// Bias the samples were integrated with.
    pub bias_ref: ImuBias,
    pub jacobians: BiasJacobians,
    /// Covariance of `(dP, dV, dR)`.
    pub covariance: Matrix9,
    /// Inverse of `covariance`.
    pub info: Matrix9,
}

impl Preintegrated {
    pub fn delta(&self) -> MotionDelta {
        MotionDelta {
            dt: self.dt,
            dp: self.delta_p,
            dv: self.delta_v,
            dr: self.delta_r,
        }
    }

    /// Deltas corrected to first order for a bias different from `bias_ref`.
    pub fn corrected(&self, bias: &ImuBias) -> MotionDelta {
        let dba = bias.accel - self.bias_ref.accel;
        let dbg = bias.gyro - self.bias_ref.gyro;
        let j = &self.jacobians;
        MotionDelta {
            dt: self.dt,
            dp: self.delta_p + j.dp_dba * dba + j.dp_dbg * dbg,
            dv: self.delta_v + j.dv_dba * dba + j.dv_dbg * dbg,
            dr: self.delta_r.compose(&so3_exp(&(j.dr_dbg * dbg))),
        }
    }
}

fn validate(samples: &[ImuSample]) -> Result<(), ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::EmptyBuffer(samples.len()));
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(ImuError::NonMonotonicTimestamps(i + 1));
        }
    }
    Ok(())
}

/// Quadratic Lagrange interpolation through three samples.
fn lagrange3(t: [f64; 3], y: [Vector3<f64>; 3], at: f64) -> Vector3<f64> {
    let l0 = (at - t[1]) * (at - t[2]) / ((t[0] - t[1]) * (t[0] - t[2]));
    let l1 = (at - t[0]) * (at - t[2]) / ((t[1] - t[0]) * (t[1] - t[2]));
    let l2 = (at - t[0]) * (at - t[1]) / ((t[2] - t[0]) * (t[2] - t[1]));
    y[0] * l0 + y[1] * l1 + y[2] * l2
}

/// One integration step of length `h` given bias-free rates and specific
/// forces at the start, midpoint and end of the step.
///
/// Rotation uses the fourth-order Magnus expansion `int(w) + h^2/12 w0 x w1`;
/// velocity and position use Simpson quadrature of the rotated specific force.
fn step(delta: &mut MotionDelta, h: f64, w: [Vector3<f64>; 3], a: [Vector3<f64>; 3]) {
    let half = 0.5 * h;
    let phi_half = (w[0] * 5.0 + w[1] * 8.0 - w[2]) * (h / 24.0) + w[0].cross(&w[1]) * (half * half / 12.0);
    let phi_full = (w[0] + w[1] * 4.0 + w[2]) * (h / 6.0) + w[0].cross(&w[2]) * (h * h / 12.0);
    let r0 = delta.dr;
    let rm = r0.compose(&so3_exp(&phi_half));
    let r1 = r0.compose(&so3_exp(&phi_full));
    let g0 = r0.rotate(&a[0]);
    let gm = rm.rotate(&a[1]);
    let g1 = r1.rotate(&a[2]);
    delta.dp += delta.dv * h + (g0 + gm * 2.0) * (h * h / 6.0);
    delta.dv += (g0 + gm * 4.0 + g1) * (h / 6.0);
    delta.dr = r1;
    delta.dt += h;
}

/// Integrates bias-corrected samples into a relative motion.
///
/// Samples are consumed in pairs of steps `(k, k+1, k+2)` so that the middle
/// sample supplies the midpoint value; an odd trailing step interpolates its
/// midpoint quadratically from the last three samples.
pub fn integrate_deltas(samples: &[ImuSample], bias: &ImuBias) -> Result<MotionDelta, ImuError> {
    validate(samples)?;
    let w = |s: &ImuSample| s.gyro - bias.gyro;
    let a = |s: &ImuSample| s.accel - bias.accel;
    let mut delta = MotionDelta::identity();
    let n = samples.len();
    let mut i = 0;
    while i + 1 < n {
        if i + 2 < n {
            let (s0, s1, s2) = (&samples[i], &samples[i + 1], &samples[i + 2]);
            let h = s2.t - s0.t;
            let mid = s0.t + 0.5 * h;
            let ts = [s0.t, s1.t, s2.t];
            let wm = lagrange3(ts, [w(s0), w(s1), w(s2)], mid);
            let am = lagrange3(ts, [a(s0), a(s1), a(s2)], mid);
            step(&mut delta, h, [w(s0), wm, w(s2)], [a(s0), am, a(s2)]);
            i += 2;
        } else {
            let (s0, s1) = (&samples[i], &samples[i + 1]);
            let h = s1.t - s0.t;
            let mid = s0.t + 0.5 * h;
            let (wm, am) = if i >= 1 {
                let sp = &samples[i - 1];
                let ts = [sp.t, s0.t, s1.t];
                (
                    lagrange3(ts, [w(sp), w(s0), w(s1)], mid),
                    lagrange3(ts, [a(sp), a(s0), a(s1)], mid),
                )
            } else {
                ((w(s0) + w(s1)) * 0.5, (a(s0) + a(s1)) * 0.5)
            };
            step(&mut delta, h, [w(s0), wm, w(s1)], [a(s0), am, a(s1)]);
            i += 1;
        }
    }
    Ok(delta)
}

fn bias_jacobians(samples: &[ImuSample], bias: &ImuBias, nominal: &MotionDelta) -> Result<BiasJacobians, ImuError> {
    let mut j = BiasJacobians {
        dp_dba: Matrix3::zeros(),
        dp_dbg: Matrix3::zeros(),
        dv_dba: Matrix3::zeros(),
        dv_dbg: Matrix3::zeros(),
        dr_dbg: Matrix3::zeros(),
    };
    let inv = nominal.dr.inverse();
    for axis in 0..3 {
        let mut e = Vector3::zeros();
        e[axis] = BIAS_FD_STEP;
        let denom = 2.0 * BIAS_FD_STEP;

        let plus = integrate_deltas(
            samples,
            &ImuBias {
                accel: bias.accel + e,
                ..*bias
            },
        )?;
        let minus = integrate_deltas(
            samples,
            &ImuBias {
                accel: bias.accel - e,
                ..*bias
            },
        )?;
        j.dp_dba.set_column(axis, &((plus.dp - minus.dp) / denom));
        j.dv_dba.set_column(axis, &((plus.dv - minus.dv) / denom));

        let plus = integrate_deltas(
            samples,
            &ImuBias {
                gyro: bias.gyro + e,
                ..*bias
            },
        )?;
        let minus = integrate_deltas(
            samples,
            &ImuBias {
                gyro: bias.gyro - e,
                ..*bias
            },
        )?;
        j.dp_dbg.set_column(axis, &((plus.dp - minus.dp) / denom));
        j.dv_dbg.set_column(axis, &((plus.dv - minus.dv) / denom));
        let rp = so3_log(&inv.compose(&plus.dr));
        let rm = so3_log(&inv.compose(&minus.dr));
        j.dr_dbg.set_column(axis, &((rp - rm) / denom));
    }
    Ok(j)
}

/// First-order propagation of per-sample white noise through the
/// integration, error state ordered `(dP, dV, dR)`.
fn propagate_covariance(samples: &[ImuSample], bias: &ImuBias, noise: &ImuNoise) -> Matrix9 {
    let mut cov = Matrix9::zeros();
    let mut dr = Rotation::identity();
    let qa = noise.sigma_accel * noise.sigma_accel;
    let qg = noise.sigma_gyro * noise.sigma_gyro;
    for w in samples.windows(2) {
        let h = w[1].t - w[0].t;
        let omega = (w[0].gyro + w[1].gyro) * 0.5 - bias.gyro;
        let acc = (w[0].accel + w[1].accel) * 0.5 - bias.accel;
        let r = dr.matrix();
        let ra_hat = r * hat(&acc);
        let step_rot = so3_exp(&(omega * h));

        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * h));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.5 * h * h * ra_hat));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-h * ra_hat));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&step_rot.matrix().transpose());

        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.5 * h * h * r));
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(h * r));
        b.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(h * so3_right_jacobian(&(omega * h))));

        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = qa;
            q[(i + 3, i + 3)] = qg;
        }
        cov = a * cov * a.transpose() + b * q * b.transpose();
        dr = dr.compose(&step_rot);
    }
    0.5 * (cov + cov.transpose())
}

fn invert_spd9(m: &Matrix9) -> Result<Matrix9, ImuError> {
    let chol = m.cholesky().ok_or(ImuError::SingularCovariance)?;
    let inv = chol.inverse();
    Ok(0.5 * (inv + inv.transpose()))
}

/// Preintegrates a buffer of samples spanning one keyframe interval.
pub fn preintegrate(samples: &[ImuSample], bias: &ImuBias, noise: &ImuNoise) -> Result<Preintegrated, ImuError> {
    let delta = integrate_deltas(samples, bias)?;
    let jacobians = bias_jacobians(samples, bias, &delta)?;
    let covariance = propagate_covariance(samples, bias, noise);
    let info = invert_spd9(&covariance)?;
    Ok(Preintegrated {
        dt: delta.dt,
        delta_p: delta.dp,
        delta_v: delta.dv,
        delta_r: delta.dr,
        bias_ref: *bias,
        jacobians,
        covariance,
        info,
    })
}

/// Samples covering `[t0, t1]`. Interval ends that do not coincide with a
/// sample (within 1e-9 s) are filled by linear interpolation.
pub fn slice_interval(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    const EPS: f64 = 1e-9;
    let interp = |t: f64| -> Option<ImuSample> {
        let k = samples.partition_point(|s| s.t < t);
        if k == 0 || k >= samples.len() {
            return None;
        }
        let (a, b) = (&samples[k - 1], &samples[k]);
        let u = (t - a.t) / (b.t - a.t);
        Some(ImuSample {
            t,
            accel: a.accel * (1.0 - u) + b.accel * u,
            gyro: a.gyro * (1.0 - u) + b.gyro * u,
        })
    };
    let mut out: Vec<ImuSample> = samples
        .iter()
        .filter(|s| s.t >= t0 - EPS && s.t <= t1 + EPS)
        .copied()
        .collect();
    if out.first().is_none_or(|s| (s.t - t0).abs() > EPS) {
        if let Some(s) = interp(t0) {
            out.insert(0, s);
        }
    }
    if out.last().is_none_or(|s| (s.t - t1).abs() > EPS) {
        if let Some(s) = interp(t1) {
            out.push(s);
        }
    }
    out
}

/// Residual of the ternary constraint and its Jacobians.
///
/// The position block is expressed in the body frame of the middle keyframe
/// (`R_k^T` times the world-frame position error), which makes the weighting
/// independent of the state. Jacobian blocks are ordered
/// `[pose k-1, pose k, pose k+1, bias]`, pose tangents as `[dt, dtheta]`,
/// bias tangent as `[d b_a, d b_g]`.
#[derive(Debug, Clone)]
pub struct TernaryLinearization {
    pub residual: Vector9,
    pub jacobians: [Matrix9x6; 4],
}

struct TernaryParts {
    e_pos_world: Vector3<f64>,
    e_rot1: Vector3<f64>,
    e_rot2: Vector3<f64>,
}

fn check_intervals(pre1: &Preintegrated, pre2: &Preintegrated) -> Result<(), ImuError> {
    if !(pre1.dt > 0.0 && pre2.dt > 0.0) {
        return Err(ImuError::DegenerateInterval(pre1.dt, pre2.dt));
    }
    Ok(())
}

fn ternary_parts(
    poses: [&Pose; 3],
    pre1: &Preintegrated,
    pre2: &Preintegrated,
    bias: &ImuBias,
    gravity: &Vector3<f64>,
) -> TernaryParts {
    let [p0, p1, p2] = poses;
    let d1 = pre1.corrected(bias);
    let d2 = pre2.corrected(bias);
    let (dt1, dt2) = (d1.dt, d2.dt);
    let v0 = (p1.translation - p0.translation - 0.5 * gravity * dt1 * dt1 - p0.rotation.rotate(&d1.dp)) / dt1;
    let v1 = v0 + gravity * dt1 + p0.rotation.rotate(&d1.dv);
    let e_pos_world =
        p2.translation - (p1.translation + v1 * dt2 + 0.5 * gravity * dt2 * dt2 + p1.rotation.rotate(&d2.dp));
    let e1 = d1.dr.inverse().compose(&p0.rotation.inverse()).compose(&p1.rotation);
    let e2 = d2.dr.inverse().compose(&p1.rotation.inverse()).compose(&p2.rotation);
    TernaryParts {
        e_pos_world,
        e_rot1: so3_log(&e1),
        e_rot2: so3_log(&e2),
    }
}

/// World-frame ternary residual `(position, rotation 1, rotation 2)` for
/// keyframes `k-1, k, k+1`, with velocities eliminated algebraically.
pub fn imu_ternary_residual(
    p_prev: &Pose,
    p_mid: &Pose,
    p_next: &Pose,
    pre1: &Preintegrated,
    pre2: &Preintegrated,
    bias: &ImuBias,
    gravity: &Vector3<f64>,
) -> Result<Vector9, ImuError> {
    check_intervals(pre1, pre2)?;
    let parts = ternary_parts([p_prev, p_mid, p_next], pre1, pre2, bias, gravity);
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&parts.e_pos_world);
    r.fixed_rows_mut::<3>(3).copy_from(&parts.e_rot1);
    r.fixed_rows_mut::<3>(6).copy_from(&parts.e_rot2);
    Ok(r)
}

/// Local-frame residual with analytic Jacobians (see [`TernaryLinearization`]).
pub fn ternary_linearize(
    poses: [&Pose; 3],
    pre1: &Preintegrated,
    pre2: &Preintegrated,
    bias: &ImuBias,
    gravity: &Vector3<f64>,
) -> Result<TernaryLinearization, ImuError> {
    check_intervals(pre1, pre2)?;
    let [p0, p1, p2] = poses;
    let parts = ternary_parts(poses, pre1, pre2, bias, gravity);
    let d1 = pre1.corrected(bias);
    let d2 = pre2.corrected(bias);
    let (dt1, dt2) = (d1.dt, d2.dt);
    let rho = dt2 / dt1;
    let r0 = p0.rotation.matrix();
    let r1 = p1.rotation.matrix();
    let r2 = p2.rotation.matrix();
    let r1t = r1.transpose();
    let e_l = r1t * parts.e_pos_world;

    let mut jac = [Matrix9x6::zeros(); 4];

    // position block
    let q = rho * d1.dp - dt2 * d1.dv;
    jac[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&(r1t * rho));
    jac[0].fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r1t * r0 * hat(&q)));
    jac[1].fixed_view_mut::<3, 3>(0, 0).copy_from(&(r1t * (-1.0 - rho)));
    jac[1]
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(hat(&d2.dp) + hat(&e_l)));
    jac[2].fixed_view_mut::<3, 3>(0, 0).copy_from(&r1t);
    let j1 = &pre1.jacobians;
    let j2 = &pre2.jacobians;
    let dba = r1t * (rho * r0 * j1.dp_dba - dt2 * r0 * j1.dv_dba) - j2.dp_dba;
    let dbg = r1t * (rho * r0 * j1.dp_dbg - dt2 * r0 * j1.dv_dbg) - j2.dp_dbg;
    jac[3].fixed_view_mut::<3, 3>(0, 0).copy_from(&dba);
    jac[3].fixed_view_mut::<3, 3>(0, 3).copy_from(&dbg);

    // rotation, first interval
    let jr_inv1 = so3_right_jacobian_inv(&parts.e_rot1);
    let e1 = (d1.dr.inverse().compose(&p0.rotation.inverse()).compose(&p1.rotation)).matrix();
    let phi_b1 = j1.dr_dbg * (bias.gyro - pre1.bias_ref.gyro);
    jac[0].fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jr_inv1 * r1t * r0));
    jac[1].fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv1);
    jac[3]
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-jr_inv1 * e1.transpose() * so3_right_jacobian(&phi_b1) * j1.dr_dbg));

    // rotation, second interval
    let jr_inv2 = so3_right_jacobian_inv(&parts.e_rot2);
    let e2 = (d2.dr.inverse().compose(&p1.rotation.inverse()).compose(&p2.rotation)).matrix();
    let phi_b2 = j2.dr_dbg * (bias.gyro - pre2.bias_ref.gyro);
    jac[1]
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&(-jr_inv2 * r2.transpose() * r1));
    jac[2].fixed_view_mut::<3, 3>(6, 3).copy_from(&jr_inv2);
    jac[3]
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&(-jr_inv2 * e2.transpose() * so3_right_jacobian(&phi_b2) * j2.dr_dbg));

    let mut residual = Vector9::zeros();
    residual.fixed_rows_mut::<3>(0).copy_from(&e_l);
    residual.fixed_rows_mut::<3>(3).copy_from(&parts.e_rot1);
    residual.fixed_rows_mut::<3>(6).copy_from(&parts.e_rot2);
    Ok(TernaryLinearization {
        residual,
        jacobians: jac,
    })
}

/// Information matrix of the local-frame ternary residual, obtained by
/// mapping the two interval covariances through the residual.
pub fn ternary_information(pre1: &Preintegrated, pre2: &Preintegrated) -> Result<Matrix9, ImuError> {
    check_intervals(pre1, pre2)?;
    let rho = pre2.dt / pre1.dt;
    let dr1t = pre1.delta_r.matrix().transpose();
    let mut g = SMatrix::<f64, 9, 18>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rho * dr1t));
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-pre2.dt * dr1t));
    g.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(6, 15).copy_from(&(-Matrix3::identity()));
    let mut sigma = SMatrix::<f64, 18, 18>::zeros();
    sigma.fixed_view_mut::<9, 9>(0, 0).copy_from(&pre1.covariance);
    sigma.fixed_view_mut::<9, 9>(9, 9).copy_from(&pre2.covariance);
    let cov = g * sigma * g.transpose();
    invert_spd9(&(0.5 * (cov + cov.transpose())))
}

/// Pose at keyframe `k+1` that zeroes the ternary residual given keyframes
/// `k-1` and `k`. With only one previous keyframe, pass `None` and the
/// velocity at `k` is taken as `initial_velocity`.
pub fn predict_next_pose(
    prev: Option<(&Pose, &Preintegrated)>,
    current: &Pose,
    next: &Preintegrated,
    bias: &ImuBias,
    gravity: &Vector3<f64>,
    initial_velocity: &Vector3<f64>,
) -> Pose {
    let d2 = next.corrected(bias);
    let v_k = match prev {
        Some((p0, pre1)) => {
            let d1 = pre1.corrected(bias);
            let dt1 = d1.dt;
            let v0 =
                (current.translation - p0.translation - 0.5 * gravity * dt1 * dt1 - p0.rotation.rotate(&d1.dp)) / dt1;
            v0 + gravity * dt1 + p0.rotation.rotate(&d1.dv)
        }
        None => *initial_velocity,
    };
    let dt2 = d2.dt;
    Pose {
        translation: current.translation + v_k * dt2 + 0.5 * gravity * dt2 * dt2 + current.rotation.rotate(&d2.dp),
        rotation: current.rotation.compose(&d2.dr),
    }
}
