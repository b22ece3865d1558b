//! Deterministic synthetic world: rectangles on walls, an analytic camera
//! trajectory, noisy corner observations and an IMU stream.
//!
//! The camera and IMU share one body frame. Frame `i` is taken at
//! `i / camera_rate` and IMU sample `j` at `j / imu_rate`, so frame times
//! coincide with IMU samples whenever the rates divide.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pixel, Pose, Rotation};
use crate::imu::{ImuBias, ImuSample, GRAVITY};
use crate::parameterization::{rect_structural_points, RectDims, StructuralPointIndex};

const FRAME_STREAM: u64 = 1;
const IMU_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {t} outside trajectory [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectObject {
    pub id: u32,
    /// World position of corner 0.
    pub position: Vector3<f64>,
    /// Unit quaternion `[w, x, y, z]`; the object plane is its xy plane and
    /// +z faces the side from which it can be seen.
    pub orientation: [f64; 4],
    pub w: f64,
    pub h: f64,
}

impl RectObject {
    pub fn pose(&self) -> Pose {
        let r = Rotation::from_wxyz(self.orientation).expect("validated quaternion");
        Pose::new(self.position, r)
    }

    pub fn dims(&self) -> RectDims {
        RectDims { w: self.w, h: self.h }
    }

    pub fn corners_world(&self) -> [Vector3<f64>; 4] {
        let pose = self.pose();
        rect_structural_points(&self.dims()).map(|s| pose.transform_point(&s))
    }

    pub fn center_world(&self) -> Vector3<f64> {
        self.pose()
            .transform_point(&Vector3::new(0.5 * self.w, 0.5 * self.h, 0.0))
    }

    pub fn normal_world(&self) -> Vector3<f64> {
        self.pose().rotation.rotate(&Vector3::z())
    }
}

fn default_gravity() -> Vector3<f64> {
    GRAVITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub objects: Vec<RectObject>,
    #[serde(default = "default_gravity")]
    pub gravity: Vector3<f64>,
}

/// `offset + sum A sin(2 pi f t + phase)`, terms given as `[A, f, phase]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SinusoidProfile {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub terms: Vec<[f64; 3]>,
}

impl SinusoidProfile {
    /// Value and first two time derivatives.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let mut x = self.offset;
        let mut dx = 0.0;
        let mut ddx = 0.0;
        for &[a, f, phase] in &self.terms {
            let w = TAU * f;
            let arg = w * t + phase;
            x += a * arg.sin();
            dx += a * w * arg.cos();
            ddx -= a * w * w * arg.sin();
        }
        (x, dx, ddx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub x: SinusoidProfile,
    pub y: SinusoidProfile,
    pub z: SinusoidProfile,
    pub yaw: SinusoidProfile,
    /// Fixed rotation of the camera about its own x axis (rad); positive
    /// tilts the optical axis down.
    #[serde(default)]
    pub camera_tilt: f64,
    pub duration_s: f64,
}

fn default_min_incidence() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rate_hz: f64,
    /// Objects seen at a grazing angle below this are not detected.
    #[serde(default = "default_min_incidence")]
    pub min_incidence_deg: f64,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SimError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))
    }
}

/// IMU noise sigmas are discrete per-sample standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSpec {
    pub rate_hz: f64,
    pub sigma_a: f64,
    pub sigma_g: f64,
    #[serde(default)]
    pub bias_a: Vector3<f64>,
    #[serde(default)]
    pub bias_g: Vector3<f64>,
}

impl ImuSpec {
    pub fn bias(&self) -> ImuBias {
        ImuBias {
            accel: self.bias_a,
            gyro: self.bias_g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub camera: CameraSpec,
    pub imu: ImuSpec,
    pub sigma_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub sensors: SensorSpec,
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let mut ids = BTreeSet::new();
        for o in &self.world.objects {
            if !ids.insert(o.id) {
                return bad(format!("duplicate object id {}", o.id));
            }
            if !(o.w > 0.0 && o.h > 0.0) {
                return bad(format!("object {} has non-positive size", o.id));
            }
            if Rotation::from_wxyz(o.orientation).is_none() {
                return bad(format!("object {} has an invalid orientation", o.id));
            }
        }
        let t = &self.trajectory;
        if !(t.duration_s > 0.0) {
            return bad("trajectory duration must be positive".into());
        }
        let profiles = [&t.x, &t.y, &t.z, &t.yaw];
        if profiles
            .iter()
            .any(|p| !p.offset.is_finite() || p.terms.iter().flatten().any(|v| !v.is_finite()))
        {
            return bad("trajectory terms must be finite".into());
        }
        let c = &self.sensors.camera;
        c.intrinsics()?;
        if !(c.rate_hz > 0.0) {
            return bad("camera rate must be positive".into());
        }
        let imu = &self.sensors.imu;
        if !(imu.rate_hz >= c.rate_hz) {
            return bad("IMU rate must be at least the camera rate".into());
        }
        if !(imu.sigma_a >= 0.0 && imu.sigma_g >= 0.0 && self.sensors.sigma_px >= 0.0) {
            return bad("noise sigmas must be non-negative".into());
        }
        if imu.bias_a.iter().chain(imu.bias_g.iter()).any(|v| !v.is_finite()) {
            return bad("biases must be finite".into());
        }
        Ok(())
    }

    /// Same scenario with every noise source and bias set to zero.
    pub fn noiseless(&self) -> Scenario {
        let mut s = self.clone();
        s.sensors.sigma_px = 0.0;
        s.sensors.imu.sigma_a = 0.0;
        s.sensors.imu.sigma_g = 0.0;
        s.sensors.imu.bias_a = Vector3::zeros();
        s.sensors.imu.bias_g = Vector3::zeros();
        s
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let rate = self.sensors.camera.rate_hz;
        let n = (self.trajectory.duration_s * rate + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 / rate).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Angular rate in the body frame.
    pub angular_rate: Vector3<f64>,
}

/// Orientation of a level camera at zero yaw: optical axis along world +x,
/// image x to the right (world -y), image y down (world -z).
fn level_camera() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

fn body_offset(spec: &TrajectorySpec) -> Matrix3<f64> {
    let (s, c) = spec.camera_tilt.sin_cos();
    // Rotation about the camera x axis; positive tilts the optical axis down.
    let tilt = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c);
    level_camera() * tilt
}

pub fn sample_trajectory(spec: &TrajectorySpec, t: f64) -> Result<TrajectoryState, SimError> {
    if !(0.0..=spec.duration_s).contains(&t) {
        return Err(SimError::OutOfRange {
            t,
            duration: spec.duration_s,
        });
    }
    let (x, vx, ax) = spec.x.eval(t);
    let (y, vy, ay) = spec.y.eval(t);
    let (z, vz, az) = spec.z.eval(t);
    let (yaw, yaw_rate, _) = spec.yaw.eval(t);
    let b = body_offset(spec);
    let (s, c) = yaw.sin_cos();
    let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let rotation = Rotation::from_matrix(&(rz * b));
    Ok(TrajectoryState {
        pose: Pose::new(Vector3::new(x, y, z), rotation),
        velocity: Vector3::new(vx, vy, vz),
        acceleration: Vector3::new(ax, ay, az),
        angular_rate: b.transpose() * Vector3::z() * yaw_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerObservation {
    pub object_id: u32,
    pub corner: StructuralPointIndex,
    pub u: f64,
    pub v: f64,
}

impl CornerObservation {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.u, self.v)
    }
}

/// Serialized form of a pose: position and `[w, x, y, z]` quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub position: Vector3<f64>,
    pub orientation: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            position: p.translation,
            orientation: p.rotation.to_wxyz(),
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Option<Pose> {
        Some(Pose::new(self.position, Rotation::from_wxyz(self.orientation)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub observations: Vec<CornerObservation>,
    pub gt_pose: PoseRecord,
}

impl FrameRecord {
    /// Observations grouped per object, corners in index order. Objects
    /// appear in first-observation order.
    pub fn objects(&self) -> Vec<(u32, [Pixel; 4])> {
        let mut out: Vec<(u32, [Option<Pixel>; 4])> = Vec::new();
        for o in &self.observations {
            let slot = match out.iter().position(|(id, _)| *id == o.object_id) {
                Some(k) => k,
                None => {
                    out.push((o.object_id, [None; 4]));
                    out.len() - 1
                }
            };
            out[slot].1[o.corner.slot()] = Some(o.pixel());
        }
        out.into_iter()
            .filter_map(|(id, px)| {
                let [a, b, c, d] = px;
                Some((id, [a?, b?, c?, d?]))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementLog {
    pub frames: Vec<FrameRecord>,
    pub imu: Vec<ImuSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogRecord {
    Imu(ImuSample),
    Frame(FrameRecord),
}

impl MeasurementLog {
    /// JSON lines, IMU samples interleaved before the frame sharing or
    /// following their timestamp.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), SimError> {
        let mut imu = self.imu.iter().peekable();
        for f in &self.frames {
            while let Some(s) = imu.next_if(|s| s.t <= f.t) {
                serde_json::to_writer(&mut out, &LogRecord::Imu(*s))?;
                out.write_all(b"\n")?;
            }
            serde_json::to_writer(&mut out, &LogRecord::Frame(f.clone()))?;
            out.write_all(b"\n")?;
        }
        for s in imu {
            serde_json::to_writer(&mut out, &LogRecord::Imu(*s))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, SimError> {
        let mut log = MeasurementLog::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                LogRecord::Imu(s) => log.imu.push(s),
                LogRecord::Frame(f) => log.frames.push(f),
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Corner observations of every visible object. An object is visible when
/// all four corners project in front of the camera and inside the image,
/// and the camera sees its front face at an incidence of at least
/// `min_incidence_deg`. Each visible object draws eight normals; objects
/// whose noisy corners leave the image are dropped.
pub fn observe_frame(
    world: &WorldSpec,
    k: &CameraIntrinsics,
    camera: &Pose,
    sigma_px: f64,
    min_incidence_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<CornerObservation> {
    let min_dot = min_incidence_deg.to_radians().sin();
    let mut out = Vec::new();
    for obj in &world.objects {
        let to_camera = camera.translation - obj.center_world();
        if obj.normal_world().dot(&to_camera) < min_dot * to_camera.norm() {
            continue;
        }
        let Ok(pixels) = obj
            .corners_world()
            .iter()
            .map(|c| project(k, camera, c).map(|p| p.pixel))
            .collect::<Result<Vec<_>, _>>()
        else {
            continue;
        };
        if !pixels.iter().all(|p| k.contains(p)) {
            continue;
        }
        let noisy: Vec<Pixel> = pixels
            .iter()
            .map(|p| {
                let du = sigma_px * gaussian(rng);
                let dv = sigma_px * gaussian(rng);
                Pixel::new(p.u + du, p.v + dv)
            })
            .collect();
        if !noisy.iter().all(|p| k.contains(p)) {
            continue;
        }
        for (j, p) in StructuralPointIndex::ALL.iter().zip(noisy) {
            out.push(CornerObservation {
                object_id: obj.id,
                corner: *j,
                u: p.u,
                v: p.v,
            });
        }
    }
    out
}

/// IMU samples at `j / rate` over the whole trajectory.
pub fn synthesize_imu(
    trajectory: &TrajectorySpec,
    gravity: &Vector3<f64>,
    imu: &ImuSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImuSample>, SimError> {
    let n = (trajectory.duration_s * imu.rate_hz + 1e-9).floor() as usize;
    (0..=n)
        .map(|j| {
            let t = j as f64 / imu.rate_hz;
            let s = sample_trajectory(trajectory, t)?;
            let specific = s.pose.rotation.inverse_rotate(&(s.acceleration - gravity));
            let na = Vector3::from_fn(|_, _| gaussian(rng)) * imu.sigma_a;
            let ng = Vector3::from_fn(|_, _| gaussian(rng)) * imu.sigma_g;
            Ok(ImuSample {
                t,
                accel: specific + imu.bias_a + na,
                gyro: s.angular_rate + imu.bias_g + ng,
            })
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn simulate(scenario: &Scenario) -> Result<MeasurementLog, SimError> {
    scenario.validate()?;
    let k = scenario.sensors.camera.intrinsics()?;
    let mut frame_rng = stream(scenario.seed, FRAME_STREAM);
    let mut imu_rng = stream(scenario.seed, IMU_STREAM);
    let mut frames = Vec::new();
    for t in scenario.frame_times() {
        let pose = sample_trajectory(&scenario.trajectory, t)?.pose;
        let observations = observe_frame(
            &scenario.world,
            &k,
            &pose,
            scenario.sensors.sigma_px,
            scenario.sensors.camera.min_incidence_deg,
            &mut frame_rng,
        );
        frames.push(FrameRecord {
            t,
            observations,
            gt_pose: PoseRecord::from(&pose),
        });
    }
    let imu = synthesize_imu(
        &scenario.trajectory,
        &scenario.world.gravity,
        &scenario.sensors.imu,
        &mut imu_rng,
    )?;
    Ok(MeasurementLog { frames, imu })
}
