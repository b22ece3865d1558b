//! End-to-end runs: build the factor graph from a measurement log, optimize,
//! evaluate against ground truth and write the result files.
//!
//! Every frame becomes a keyframe. Poses are initialized by propagating the
//! previous two estimates through the inertial deltas, and the graph is
//! optimized every `incremental` frames plus once at the end, so the final
//! solve always covers the full graph.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix2, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    corner_errors, dim_errors, relative_pose_error, scale_ratio, summarize, CornerError, DimError, EvalError,
    LandmarkEstimate, RelPoseError, Summary,
};
use crate::factor_graph::{
    optimize, Factor, FactorGraph, GraphError, Matrix8, OptimizeError, OptimizeReport, OptimizerConfig, Variable,
    VariableId,
};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imu::{
    predict_next_pose, preintegrate, slice_interval, ternary_information, ImuBias, ImuError, ImuNoise, Preintegrated,
};
use crate::parameterization::{init_fhp_from_pixel, init_fsp_from_single_view, FhpPoint, FspRect};
use crate::simulator::{simulate, MeasurementLog, PoseRecord, Scenario, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Fsp,
    Fhp,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::Fsp => "fsp",
            Parameterization::Fhp => "fhp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fsp,
    Fhp,
    Both,
}

impl Mode {
    pub fn parameterizations(self) -> Vec<Parameterization> {
        match self {
            Mode::Fsp => vec![Parameterization::Fsp],
            Mode::Fhp => vec![Parameterization::Fhp],
            Mode::Both => vec![Parameterization::Fsp, Parameterization::Fhp],
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("solver error: {0}")]
    Solver(#[from] OptimizeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Noise model and scheduling of the estimator. Independent of the noise
/// used to simulate the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub sigma_px: f64,
    pub imu_noise: ImuNoise,
    /// Bias random walk (per sqrt second).
    pub bias_walk_accel: f64,
    pub bias_walk_gyro: f64,
    /// Standard deviation of the weak zero-mean prior on the first bias.
    pub bias_prior_accel: f64,
    pub bias_prior_gyro: f64,
    pub omega0: f64,
    /// Optimize every this many frames while building the graph.
    pub incremental: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            imu_noise: ImuNoise::default(),
            bias_walk_accel: 1e-4,
            bias_walk_gyro: 1e-5,
            bias_prior_accel: 0.1,
            bias_prior_gyro: 0.01,
            omega0: 0.5,
            incremental: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            self.sigma_px,
            self.imu_noise.sigma_accel,
            self.imu_noise.sigma_gyro,
            self.bias_walk_accel,
            self.bias_walk_gyro,
            self.bias_prior_accel,
            self.bias_prior_gyro,
            self.omega0,
            self.optimizer.step_tolerance,
            self.optimizer.relative_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PipelineError::Config("estimator parameters must be positive".into()));
        }
        if self.incremental == 0 || self.optimizer.max_iterations == 0 || self.optimizer.max_step_halvings == 0 {
            return Err(PipelineError::Config("counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum LandmarkVars {
    Fsp(VariableId),
    Fhp([VariableId; 4]),
}

#[derive(Debug, Clone)]
struct LandmarkTrack {
    object_id: u32,
    anchor_frame: usize,
    vars: LandmarkVars,
    frames_observed: usize,
}

/// Outcome of one estimation run, before any file is written.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub parameterization: Parameterization,
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
    pub landmarks: Vec<LandmarkEstimate>,
    pub report: OptimizeReport,
    /// Objects observed in fewer than three frames.
    pub low_parallax: Vec<u32>,
    pub num_variables: usize,
    pub num_factors: usize,
    pub graph_dimension: usize,
    pub landmark_dimension: usize,
    /// Reprojection evaluations skipped over all intermediate and final solves.
    pub skipped_evaluations: usize,
}

impl Estimate {
    pub fn fsp_rects(&self) -> Vec<(u32, FspRect)> {
        self.landmarks
            .iter()
            .filter_map(|l| match l {
                LandmarkEstimate::Fsp { object_id, rect, .. } => Some((*object_id, *rect)),
                _ => None,
            })
            .collect()
    }
}

struct Builder<'a> {
    k: CameraIntrinsics,
    cfg: &'a EstimatorConfig,
    param: Parameterization,
    gravity: Vector3<f64>,
    graph: FactorGraph,
    poses: Vec<VariableId>,
    biases: Vec<VariableId>,
    pre: Vec<Preintegrated>,
    tracks: BTreeMap<u32, LandmarkTrack>,
    track_order: Vec<u32>,
    skipped: usize,
}

impl Builder<'_> {
    fn pose(&self, i: usize) -> Pose {
        *self.graph.pose(self.poses[i]).expect("pose variable")
    }

    fn bias(&self, i: usize) -> ImuBias {
        *self.graph.bias(self.biases[i]).expect("bias variable")
    }

    fn add_frame(&mut self, i: usize, gt_first: &Pose, log: &MeasurementLog) -> Result<(), PipelineError> {
        let initial = match i {
            0 => *gt_first,
            1 => predict_next_pose(
                None,
                &self.pose(0),
                &self.pre[0],
                &self.bias(0),
                &self.gravity,
                &Vector3::zeros(),
            ),
            _ => predict_next_pose(
                Some((&self.pose(i - 2), &self.pre[i - 2])),
                &self.pose(i - 1),
                &self.pre[i - 1],
                &self.bias(i - 2),
                &self.gravity,
                &Vector3::zeros(),
            ),
        };
        let pv = self.graph.add_variable(Variable::Pose(initial));
        let bias_init = if i == 0 { ImuBias::zero() } else { self.bias(i - 1) };
        let bv = self.graph.add_variable(Variable::Bias(bias_init));
        self.poses.push(pv);
        self.biases.push(bv);

        if i == 0 {
            self.graph.fix_variable(pv)?;
            let zero = self.graph.add_variable(Variable::Bias(ImuBias::zero()));
            self.graph.fix_variable(zero)?;
            self.graph.add_factor(Factor::BiasWalk {
                from: zero,
                to: bv,
                info: bias_information(self.cfg.bias_prior_accel, self.cfg.bias_prior_gyro),
            })?;
        } else {
            let dt = log.frames[i].t - log.frames[i - 1].t;
            self.graph.add_factor(Factor::BiasWalk {
                from: self.biases[i - 1],
                to: bv,
                info: bias_information(
                    self.cfg.bias_walk_accel * dt.sqrt(),
                    self.cfg.bias_walk_gyro * dt.sqrt(),
                ),
            })?;
        }
        if i >= 2 {
            let (p1, p2) = (&self.pre[i - 2], &self.pre[i - 1]);
            self.graph.add_factor(Factor::ImuTernary {
                poses: [self.poses[i - 2], self.poses[i - 1], pv],
                bias: self.biases[i - 2],
                info: ternary_information(p1, p2)?,
                pre1: Box::new(*p1),
                pre2: Box::new(*p2),
                gravity: self.gravity,
            })?;
        }
        self.add_observations(i, log)
    }

    fn add_observations(&mut self, i: usize, log: &MeasurementLog) -> Result<(), PipelineError> {
        let info_scale = 1.0 / (self.cfg.sigma_px * self.cfg.sigma_px);
        let camera = self.poses[i];
        for (object_id, pixels) in log.frames[i].objects() {
            if !self.tracks.contains_key(&object_id) {
                let vars = match self.param {
                    Parameterization::Fsp => match init_fsp_from_single_view(&self.k, &pixels, self.cfg.omega0) {
                        Ok(rect) => LandmarkVars::Fsp(self.graph.add_variable(Variable::Fsp(rect))),
                        Err(e) => {
                            log::debug!("object {object_id} not initialized at frame {i}: {e}");
                            continue;
                        }
                    },
                    Parameterization::Fhp => {
                        let mut ids = Vec::with_capacity(4);
                        for px in &pixels {
                            let p = init_fhp_from_pixel(&self.k, px, self.cfg.omega0)
                                .map_err(|e| PipelineError::Config(e.to_string()))?;
                            ids.push(self.graph.add_variable(Variable::Fhp(p)));
                        }
                        LandmarkVars::Fhp([ids[0], ids[1], ids[2], ids[3]])
                    }
                };
                // The inverse depth is unobservable from the anchor alone.
                for id in track_ids(&vars) {
                    self.graph.fix_variable(id)?;
                }
                self.tracks.insert(
                    object_id,
                    LandmarkTrack {
                        object_id,
                        anchor_frame: i,
                        vars,
                        frames_observed: 0,
                    },
                );
                self.track_order.push(object_id);
            }
            let track = self.tracks.get_mut(&object_id).expect("track exists");
            track.frames_observed += 1;
            if track.frames_observed == 2 {
                for id in track_ids(&track.vars) {
                    self.graph.unfix_variable(id)?;
                }
            }
            let anchor = self.poses[track.anchor_frame];
            match track.vars.clone() {
                LandmarkVars::Fsp(l) => {
                    self.graph.add_factor(Factor::FspReprojection {
                        camera,
                        anchor,
                        landmark: l,
                        intrinsics: self.k,
                        observed: pixels,
                        info: Matrix8::identity() * info_scale,
                    })?;
                }
                LandmarkVars::Fhp(ls) => {
                    for (l, px) in ls.iter().zip(pixels) {
                        self.graph.add_factor(Factor::FhpReprojection {
                            camera,
                            anchor,
                            landmark: *l,
                            intrinsics: self.k,
                            observed: px,
                            info: Matrix2::identity() * info_scale,
                        })?;
                    }
                }
            }
        }
        Ok(())
    }

    fn solve(&mut self) -> Result<OptimizeReport, PipelineError> {
        let report = optimize(&mut self.graph, &self.cfg.optimizer)?;
        self.skipped += report.skipped_evaluations;
        Ok(report)
    }
}

fn track_ids(vars: &LandmarkVars) -> Vec<VariableId> {
    match vars {
        LandmarkVars::Fsp(l) => vec![*l],
        LandmarkVars::Fhp(ls) => ls.to_vec(),
    }
}

fn bias_information(sigma_a: f64, sigma_g: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = 1.0 / (sigma_a * sigma_a);
        m[(i + 3, i + 3)] = 1.0 / (sigma_g * sigma_g);
    }
    m
}

/// Builds and solves the graph for one parameterization.
pub fn estimate(
    scenario: &Scenario,
    log: &MeasurementLog,
    param: Parameterization,
    cfg: &EstimatorConfig,
) -> Result<Estimate, PipelineError> {
    cfg.validate()?;
    let n = log.frames.len();
    if n < 3 {
        return Err(PipelineError::Config(format!("need at least 3 frames, log has {n}")));
    }
    let gt_first = log.frames[0]
        .gt_pose
        .to_pose()
        .ok_or_else(|| PipelineError::Config("invalid ground-truth orientation in log".into()))?;

    let mut pre = Vec::with_capacity(n - 1);
    for w in log.frames.windows(2) {
        let samples = slice_interval(&log.imu, w[0].t, w[1].t);
        pre.push(preintegrate(&samples, &ImuBias::zero(), &cfg.imu_noise)?);
    }

    let mut b = Builder {
        k: scenario.sensors.camera.intrinsics()?,
        cfg,
        param,
        gravity: scenario.world.gravity,
        graph: FactorGraph::new(),
        poses: Vec::with_capacity(n),
        biases: Vec::with_capacity(n),
        pre,
        tracks: BTreeMap::new(),
        track_order: Vec::new(),
        skipped: 0,
    };
    let mut report = None;
    for i in 0..n {
        b.add_frame(i, &gt_first, log)?;
        let last = i + 1 == n;
        if last || (i + 1) % cfg.incremental == 0 {
            let r = b.solve()?;
            if !r.converged {
                log::warn!("solve after frame {i} stopped after {} iterations", r.iterations);
            }
            if last {
                report = Some(r);
            }
        }
    }
    let report = report.expect("final solve ran");

    let poses: Vec<Pose> = (0..n).map(|i| b.pose(i)).collect();
    let mut landmarks = Vec::with_capacity(b.track_order.len());
    let mut low_parallax = Vec::new();
    for id in &b.track_order {
        let t = &b.tracks[id];
        let anchor = poses[t.anchor_frame];
        if t.frames_observed < 3 {
            low_parallax.push(t.object_id);
        }
        landmarks.push(match &t.vars {
            LandmarkVars::Fsp(l) => LandmarkEstimate::Fsp {
                object_id: t.object_id,
                anchor,
                rect: *b.graph.fsp(*l).expect("fsp variable"),
            },
            LandmarkVars::Fhp(ls) => LandmarkEstimate::Fhp {
                object_id: t.object_id,
                corners: ls.map(|l| (anchor, *b.graph.fhp(l).expect("fhp variable"))),
            },
        });
    }
    Ok(Estimate {
        parameterization: param,
        times: log.frames.iter().map(|f| f.t).collect(),
        poses,
        landmarks,
        report,
        low_parallax,
        num_variables: b.graph.num_variables(),
        num_factors: b.graph.factors().len(),
        graph_dimension: b.graph.dimension(),
        landmark_dimension: b.graph.landmark_dimension(),
        skipped_evaluations: b.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub relpose_translation_m: Summary,
    pub relpose_rotation_rad: Summary,
    pub corner_m: Summary,
    pub width_m: Option<Summary>,
    pub height_m: Option<Summary>,
    /// Estimated over true distance between the farthest-apart landmark origins.
    pub scale_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub relpose: Vec<RelPoseError>,
    pub corners: Vec<CornerError>,
    pub dims: Vec<DimError>,
    pub metrics: Metrics,
}

pub fn evaluate(
    scenario: &Scenario,
    log: &MeasurementLog,
    poses: &[Pose],
    landmarks: &[LandmarkEstimate],
) -> Result<Evaluation, PipelineError> {
    let gt: Vec<Pose> = log
        .frames
        .iter()
        .map(|f| f.gt_pose.to_pose())
        .collect::<Option<_>>()
        .ok_or_else(|| PipelineError::Config("invalid ground-truth orientation in log".into()))?;
    let relpose = relative_pose_error(poses, &gt)?;
    let corners = corner_errors(landmarks, &scenario.world)?;
    let fsp: Vec<(u32, FspRect)> = landmarks
        .iter()
        .filter_map(|l| match l {
            LandmarkEstimate::Fsp { object_id, rect, .. } => Some((*object_id, *rect)),
            _ => None,
        })
        .collect();
    let dims = dim_errors(&fsp, &scenario.world)?;
    let mut origins = Vec::with_capacity(landmarks.len());
    for l in landmarks {
        let est = l.corners_world()?[0];
        let truth = scenario
            .world
            .objects
            .iter()
            .find(|o| o.id == l.object_id())
            .ok_or(EvalError::MissingLandmark(l.object_id()))?
            .position;
        origins.push((est, truth));
    }
    let t: Vec<f64> = relpose.iter().map(|e| e.translation).collect();
    let r: Vec<f64> = relpose.iter().map(|e| e.rotation).collect();
    let c: Vec<f64> = corners.iter().map(|e| e.error).collect();
    let (width_m, height_m) = if dims.is_empty() {
        (None, None)
    } else {
        let w: Vec<f64> = dims.iter().map(|d| d.w_err).collect();
        let h: Vec<f64> = dims.iter().map(|d| d.h_err).collect();
        (Some(summarize(&w)), Some(summarize(&h)))
    };
    let metrics = Metrics {
        relpose_translation_m: summarize(&t),
        relpose_rotation_rad: summarize(&r),
        corner_m: summarize(&c),
        width_m,
        height_m,
        scale_ratio: scale_ratio(&origins),
    };
    Ok(Evaluation {
        relpose,
        corners,
        dims,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub frames: usize,
    pub variables: usize,
    pub factors: usize,
    pub landmarks: usize,
    pub graph_dimension: usize,
    pub landmark_dimension: usize,
    pub skipped_evaluations: usize,
    pub outlier_factors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Parameterization,
    pub converged: bool,
    pub optimize: OptimizeReport,
    pub metrics: Metrics,
    pub counters: Counters,
    pub low_parallax_objects: Vec<u32>,
    pub wall_time_s: f64,
}

/// Options of the `run` command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub log: Option<PathBuf>,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub estimator: EstimatorConfig,
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_poses(path: &Path, times: &[f64], poses: &[Pose]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "px", "py", "pz", "qw", "qx", "qy", "qz"])?;
    for (t, p) in times.iter().zip(poses) {
        let q = p.rotation.to_wxyz();
        let vals = [
            *t,
            p.translation.x,
            p.translation.y,
            p.translation.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        w.write_record(vals.iter().map(|v| fmt(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::Config(format!("bad pose row: {e}")))?;
        if v.len() != 8 {
            return Err(PipelineError::Config("pose rows need 8 columns".into()));
        }
        let rec = PoseRecord {
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: [v[4], v[5], v[6], v[7]],
        };
        out.push(
            rec.to_pose()
                .ok_or_else(|| PipelineError::Config("bad quaternion in pose file".into()))?,
        );
    }
    Ok(out)
}

fn write_metrics(dir: &Path, name: &str, times: &[f64], ev: &Evaluation) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(dir.join(format!("relpose_{name}.csv")))?;
    w.write_record(["t", "trans_err_m", "rot_err_rad"])?;
    for (t, e) in times.iter().skip(1).zip(&ev.relpose) {
        w.write_record([fmt(*t), fmt(e.translation), fmt(e.rotation)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(format!("corners_{name}.csv")))?;
    w.write_record(["object_id", "corner_j", "err_m"])?;
    for e in &ev.corners {
        w.write_record([e.object_id.to_string(), e.corner.get().to_string(), fmt(e.error)])?;
    }
    w.flush()?;

    if name == Parameterization::Fsp.name() {
        let mut w = csv::Writer::from_path(dir.join("dims_fsp.csv"))?;
        w.write_record(["object_id", "w_err_m", "h_err_m", "w_est", "h_est"])?;
        for d in &ev.dims {
            w.write_record([
                d.object_id.to_string(),
                fmt(d.w_err),
                fmt(d.h_err),
                fmt(d.w_est),
                fmt(d.h_est),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Serialized landmark estimates, enough to recompute every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LandmarkRecord {
    Fsp {
        object_id: u32,
        anchor: PoseRecord,
        rect: FspRect,
    },
    Fhp {
        object_id: u32,
        anchor: PoseRecord,
        points: [FhpPoint; 4],
    },
}

impl From<&LandmarkEstimate> for LandmarkRecord {
    fn from(l: &LandmarkEstimate) -> Self {
        match l {
            LandmarkEstimate::Fsp {
                object_id,
                anchor,
                rect,
            } => LandmarkRecord::Fsp {
                object_id: *object_id,
                anchor: anchor.into(),
                rect: *rect,
            },
            LandmarkEstimate::Fhp { object_id, corners } => LandmarkRecord::Fhp {
                object_id: *object_id,
                anchor: (&corners[0].0).into(),
                points: corners.map(|c| c.1),
            },
        }
    }
}

impl LandmarkRecord {
    fn to_estimate(&self) -> Result<LandmarkEstimate, PipelineError> {
        let bad = || PipelineError::Config("bad anchor orientation in landmark file".into());
        Ok(match self {
            LandmarkRecord::Fsp {
                object_id,
                anchor,
                rect,
            } => LandmarkEstimate::Fsp {
                object_id: *object_id,
                anchor: anchor.to_pose().ok_or_else(bad)?,
                rect: *rect,
            },
            LandmarkRecord::Fhp {
                object_id,
                anchor,
                points,
            } => {
                let a = anchor.to_pose().ok_or_else(bad)?;
                LandmarkEstimate::Fhp {
                    object_id: *object_id,
                    corners: points.map(|p| (a, p)),
                }
            }
        })
    }
}

fn report_for(est: &Estimate, metrics: Metrics, wall_time_s: f64) -> RunReport {
    RunReport {
        mode: est.parameterization,
        converged: est.report.converged,
        optimize: est.report.clone(),
        metrics,
        counters: Counters {
            frames: est.poses.len(),
            variables: est.num_variables,
            factors: est.num_factors,
            landmarks: est.landmarks.len(),
            graph_dimension: est.graph_dimension,
            landmark_dimension: est.landmark_dimension,
            skipped_evaluations: est.skipped_evaluations,
            outlier_factors: est.report.outlier_factors.len(),
        },
        low_parallax_objects: est.low_parallax.clone(),
        wall_time_s,
    }
}

/// Writes every result file of one parameterization into `dir`.
pub fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    log: &MeasurementLog,
    est: &Estimate,
    wall_time_s: f64,
) -> Result<RunReport, PipelineError> {
    let name = est.parameterization.name();
    let ev = evaluate(scenario, log, &est.poses, &est.landmarks)?;
    write_poses(&dir.join(format!("poses_{name}.csv")), &est.times, &est.poses)?;
    write_metrics(dir, name, &est.times, &ev)?;
    let records: Vec<LandmarkRecord> = est.landmarks.iter().map(LandmarkRecord::from).collect();
    std::fs::write(
        dir.join(format!("landmarks_{name}.json")),
        serde_json::to_string_pretty(&records)?,
    )?;
    let report = report_for(est, ev.metrics, wall_time_s);
    std::fs::write(
        dir.join(format!("report_{name}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, PipelineError> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

/// Runs the requested parameterizations on one shared measurement log.
pub fn run_pipeline(config: &RunConfig) -> Result<Vec<RunReport>, PipelineError> {
    config.estimator.validate()?;
    let scenario = load_scenario(&config.scenario, config.seed)?;
    let log = match &config.log {
        Some(p) => MeasurementLog::load(p)?,
        None => simulate(&scenario)?,
    };
    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(config.out_dir.join("scenario.json"), scenario.to_json())?;
    log.save(&config.out_dir.join("log.jsonl"))?;
    let mut reports = Vec::new();
    for param in config.mode.parameterizations() {
        let start = Instant::now();
        let est = estimate(&scenario, &log, param, &config.estimator)?;
        let elapsed = start.elapsed().as_secs_f64();
        reports.push(write_outputs(&config.out_dir, &scenario, &log, &est, elapsed)?);
    }
    Ok(reports)
}

/// Recomputes the metric files of a finished run directory from its poses,
/// landmarks, scenario and log.
pub fn eval_run(dir: &Path) -> Result<Vec<(Parameterization, Metrics)>, PipelineError> {
    let scenario = Scenario::load(&dir.join("scenario.json"))?;
    let log = MeasurementLog::load(&dir.join("log.jsonl"))?;
    let mut out = Vec::new();
    for param in [Parameterization::Fsp, Parameterization::Fhp] {
        let name = param.name();
        let poses_path = dir.join(format!("poses_{name}.csv"));
        if !poses_path.exists() {
            continue;
        }
        let poses = read_poses(&poses_path)?;
        let records: Vec<LandmarkRecord> =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("landmarks_{name}.json")))?)?;
        let landmarks = records
            .iter()
            .map(LandmarkRecord::to_estimate)
            .collect::<Result<Vec<_>, _>>()?;
        let times: Vec<f64> = log.frames.iter().map(|f| f.t).collect();
        let ev = evaluate(&scenario, &log, &poses, &landmarks)?;
        write_metrics(dir, name, &times, &ev)?;
        out.push((param, ev.metrics));
    }
    if out.is_empty() {
        return Err(PipelineError::Config(format!(
            "no run outputs found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;

    fn short(duration: f64) -> Scenario {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/default.json");
        let mut s = Scenario::load(&path).unwrap();
        s.trajectory.duration_s = duration;
        s
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        let bad = [
            EstimatorConfig {
                sigma_px: 0.0,
                ..Default::default()
            },
            EstimatorConfig {
                omega0: f64::NAN,
                ..Default::default()
            },
            EstimatorConfig {
                incremental: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        }
    }

    #[test]
    fn noiseless_short_run_recovers_ground_truth() {
        let s = short(10.0).noiseless();
        let log = simulate(&s).unwrap();
        for param in [Parameterization::Fsp, Parameterization::Fhp] {
            let est = estimate(&s, &log, param, &EstimatorConfig::default()).unwrap();
            assert!(est.report.converged);
            assert!(est.report.final_cost < 1e-10, "{:?}", est.report);
            let ev = evaluate(&s, &log, &est.poses, &est.landmarks).unwrap();
            assert!(ev.metrics.corner_m.max < 1e-3);
            assert!(ev.metrics.relpose_translation_m.max < 1e-4);
        }
    }

    #[test]
    fn state_dimensions_follow_parameterization() {
        let s = short(4.0);
        let log = simulate(&s).unwrap();
        let fsp = estimate(&s, &log, Parameterization::Fsp, &EstimatorConfig::default()).unwrap();
        let fhp = estimate(&s, &log, Parameterization::Fhp, &EstimatorConfig::default()).unwrap();
        let n = fsp.landmarks.len();
        assert_eq!(fsp.landmark_dimension, 8 * n);
        assert_eq!(fhp.landmark_dimension, 12 * n);
        // poses, biases and the fixed prior bias
        let frames = log.frames.len();
        assert_eq!(fsp.graph_dimension, 8 * n + 6 * frames + 6 * frames + 6);
    }

    #[test]
    fn too_short_log_is_rejected() {
        let s = short(0.15);
        let log = simulate(&s).unwrap();
        assert_eq!(log.frames.len(), 2);
        assert!(matches!(
            estimate(&s, &log, Parameterization::Fsp, &EstimatorConfig::default()),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn low_parallax_objects_are_flagged() {
        let s = short(0.2);
        let log = simulate(&s).unwrap();
        let est = estimate(&s, &log, Parameterization::Fsp, &EstimatorConfig::default()).unwrap();
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        for f in &log.frames {
            for (id, _) in f.objects() {
                *seen.entry(id).or_default() += 1;
            }
        }
        let expected: Vec<u32> = seen.iter().filter(|(_, n)| **n < 3).map(|(id, _)| *id).collect();
        let mut flagged = est.low_parallax.clone();
        flagged.sort();
        assert_eq!(flagged, expected);
    }

    #[test]
    fn pose_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        let poses: Vec<Pose> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.37;
                Pose::new(
                    Vector3::new(x.sin(), x.cos() * 1e-7, 3.0 + x),
                    so3_exp(&Vector3::new(0.3 * x, -0.2, x.cos())),
                )
            })
            .collect();
        let times: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        write_poses(&path, &times, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.translation, b.translation);
            assert_eq!(a.rotation.to_wxyz(), b.rotation.to_wxyz());
        }
    }

    #[test]
    fn landmark_records_round_trip() {
        let s = short(2.0);
        let log = simulate(&s).unwrap();
        for param in [Parameterization::Fsp, Parameterization::Fhp] {
            let est = estimate(&s, &log, param, &EstimatorConfig::default()).unwrap();
            let records: Vec<LandmarkRecord> = est.landmarks.iter().map(LandmarkRecord::from).collect();
            let text = serde_json::to_string(&records).unwrap();
            let back: Vec<LandmarkRecord> = serde_json::from_str(&text).unwrap();
            assert_eq!(back, records);
            for (r, l) in back.iter().zip(&est.landmarks) {
                assert_eq!(
                    r.to_estimate().unwrap().corners_world().unwrap(),
                    l.corners_world().unwrap()
                );
            }
        }
    }
}
