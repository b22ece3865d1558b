//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fsp_slam::eval::LandmarkEstimate;
use fsp_slam::factor_graph::{Factor, FactorGraph, Matrix8, Variable, VariableId, DEFAULT_NUMERICAL_STEP};
use fsp_slam::geometry::{so3_exp, CameraIntrinsics, Pixel, Pose};
use fsp_slam::imu::{
    imu_ternary_residual, preintegrate, slice_interval, ternary_information, ImuBias, ImuNoise, Preintegrated,
};
use fsp_slam::parameterization::{fsp_project, FhpPoint, FspRect, StructuralPointIndex};
use fsp_slam::pipeline::{
    estimate, evaluate, run_pipeline, Estimate, EstimatorConfig, Mode, Parameterization, RunConfig,
};
use fsp_slam::simulator::{simulate, MeasurementLog, Scenario};
use nalgebra::{Matrix2, Matrix6, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/default.json")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gt_poses(log: &MeasurementLog) -> Vec<Pose> {
    log.frames.iter().map(|f| f.gt_pose.to_pose().unwrap()).collect()
}

fn max_corner_disagreement(a: &[LandmarkEstimate], b: &[LandmarkEstimate]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for la in a {
        let lb = b
            .iter()
            .find(|l| l.object_id() == la.object_id())
            .ok_or_else(|| format!("object {} missing", la.object_id()))?;
        let ca = la.corners_world().map_err(|e| e.to_string())?;
        let cb = lb.corners_world().map_err(|e| e.to_string())?;
        for (x, y) in ca.iter().zip(&cb) {
            worst = worst.max((x - y).norm());
        }
    }
    Ok(worst)
}

fn noiseless_end_to_end(scenario: &Scenario) -> Outcome {
    let s = scenario.noiseless();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (log, est) = pool.install(|| -> Result<_, String> {
        let log = simulate(&s).map_err(|e| e.to_string())?;
        let est = estimate(&s, &log, Parameterization::Fsp, &EstimatorConfig::default()).map_err(|e| e.to_string())?;
        Ok((log, est))
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    let ev = evaluate(&s, &log, &est.poses, &est.landmarks).map_err(|e| e.to_string())?;
    let m = &ev.metrics;
    let dim_max = ev.dims.iter().map(|d| d.w_err.max(d.h_err)).fold(0.0, f64::max);
    let r = &est.report;
    let ok = r.converged
        && r.iterations <= 25
        && r.final_cost < 1e-10
        && ev.dims.len() == s.world.objects.len()
        && dim_max < 1e-3
        && m.corner_m.max < 1e-3
        && m.relpose_translation_m.max < 1e-4
        && m.relpose_rotation_rad.max < 1e-5
        && elapsed < 60.0;
    check(
        ok,
        format!(
            "converged={} iterations={} cost={:.3e} dim_max={:.3e} m corner_max={:.3e} m rpe_max={:.3e} m / {:.3e} rad time={:.2}s (1 thread)",
            r.converged,
            r.iterations,
            r.final_cost,
            dim_max,
            m.corner_m.max,
            m.relpose_translation_m.max,
            m.relpose_rotation_rad.max,
            elapsed
        ),
    )
}

fn random_pose(rng: &mut ChaCha8Rng, spread: f64, angle: f64) -> Pose {
    let t = Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
    let w = Vector3::from_fn(|_, _| rng.random_range(-angle..angle));
    Pose::new(t, so3_exp(&w))
}

fn random_rect(rng: &mut ChaCha8Rng) -> FspRect {
    FspRect {
        ray: Vector2::from_fn(|_, _| rng.random_range(-0.4..0.4)),
        omega: rng.random_range(0.05..2.0),
        w_bar: rng.random_range(0.05..0.6),
        form_factor: rng.random_range(0.3..3.0),
        rel_orientation: so3_exp(&Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6))),
    }
}

fn omega_invariance(k: &CameraIntrinsics) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let anchor = random_pose(&mut rng, 5.0, std::f64::consts::PI);
        let l = random_rect(&mut rng);
        let scaled = FspRect {
            omega: l.omega * rng.random_range(0.01..100.0),
            ..l
        };
        let mut valid = true;
        for j in StructuralPointIndex::ALL {
            match (
                fsp_project(k, &anchor, &anchor, &l, j),
                fsp_project(k, &anchor, &anchor, &scaled, j),
            ) {
                (Ok(a), Ok(b)) => worst = worst.max(a.distance(&b)),
                (Err(_), Err(_)) => valid = false,
                _ => return Err("validity changed under omega rescaling".into()),
            }
        }
        if valid {
            checked += 1;
        }
    }
    check(
        worst < 1e-9,
        format!("{checked} configurations, max pixel change {worst:.3e} px"),
    )
}

fn omega0_sweep(scenario: &Scenario, log: &MeasurementLog) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for param in [Parameterization::Fsp, Parameterization::Fhp] {
        let mut runs = Vec::new();
        for omega0 in [0.1, 0.5, 5.0] {
            let cfg = EstimatorConfig {
                omega0,
                ..EstimatorConfig::default()
            };
            let est = estimate(scenario, log, param, &cfg).map_err(|e| e.to_string())?;
            ok &= est.report.converged;
            runs.push(est);
        }
        let mut worst: f64 = 0.0;
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                worst = worst.max(max_corner_disagreement(&runs[i].landmarks, &runs[j].landmarks)?);
            }
        }
        ok &= worst < 1e-4;
        details.push(format!("{} max pairwise corner difference {worst:.3e} m", param.name()));
    }
    check(ok, details.join(", "))
}

fn jacobian_error(g: &FactorGraph, f: &Factor) -> Result<f64, String> {
    let lin = g.linearize(f).ok_or("factor not evaluable")?;
    let num = g
        .numerical_jacobian(f, DEFAULT_NUMERICAL_STEP)
        .ok_or("numerical Jacobian failed")?;
    let scale = num.iter().map(|n| n.amax()).fold(1e-3, f64::max);
    Ok(lin
        .jacobians
        .iter()
        .zip(&num)
        .map(|(a, n)| (a - n).amax() / scale)
        .fold(0.0, f64::max))
}

fn jacobian_suite(k: &CameraIntrinsics, log: &MeasurementLog, pre: &[Preintegrated], gravity: Vector3<f64>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = gt_poses(log);
    let names = [
        "FspReprojection",
        "FhpReprojection",
        "ImuTernary",
        "BiasWalk",
        "PosePrior",
    ];
    let mut worst = [0.0f64; 5];
    let mut counts = [0usize; 5];
    let noise = |rng: &mut ChaCha8Rng| Vector2::from_fn(|_, _| rng.random_range(-3.0..3.0));

    while counts[0] < 100 || counts[1] < 100 {
        let anchor = random_pose(&mut rng, 3.0, 1.0);
        let same = counts[0] % 5 == 0;
        let camera = if same {
            anchor
        } else {
            anchor.compose(&random_pose(&mut rng, 0.4, 0.3))
        };
        let l = random_rect(&mut rng);
        let Ok(obs) = StructuralPointIndex::ALL
            .iter()
            .map(|j| fsp_project(k, &camera, &anchor, &l, *j))
            .collect::<Result<Vec<_>, _>>()
        else {
            continue;
        };
        let observed: [Pixel; 4] = std::array::from_fn(|j| {
            let n = noise(&mut rng);
            Pixel::new(obs[j].u + n.x, obs[j].v + n.y)
        });
        let mut g = FactorGraph::new();
        let a = g.add_variable(Variable::Pose(anchor));
        let c = if same {
            a
        } else {
            g.add_variable(Variable::Pose(camera))
        };
        let lv = g.add_variable(Variable::Fsp(l));
        let fv = g.add_variable(Variable::Fhp(FhpPoint {
            ray: l.ray,
            omega: l.omega,
        }));
        let fsp = Factor::FspReprojection {
            camera: c,
            anchor: a,
            landmark: lv,
            intrinsics: *k,
            observed,
            info: Matrix8::identity(),
        };
        let fhp = Factor::FhpReprojection {
            camera: c,
            anchor: a,
            landmark: fv,
            intrinsics: *k,
            observed: observed[0],
            info: Matrix2::identity(),
        };
        for (slot, f) in [(0, fsp), (1, fhp)] {
            worst[slot] = worst[slot].max(jacobian_error(&g, &f)?);
            counts[slot] += 1;
        }
    }

    for _ in 0..100 {
        let i = rng.random_range(0..pre.len() - 1);
        let mut g = FactorGraph::new();
        let poses: Vec<VariableId> = (i..i + 3)
            .map(|n| g.add_variable(Variable::Pose(gt[n].compose(&random_pose(&mut rng, 0.05, 0.05)))))
            .collect();
        let bias = |rng: &mut ChaCha8Rng| ImuBias {
            accel: Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
            gyro: Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01)),
        };
        let b0 = g.add_variable(Variable::Bias(bias(&mut rng)));
        let b1 = g.add_variable(Variable::Bias(bias(&mut rng)));
        let info6 = Matrix6::from_fn(|r, c| if r == c { rng.random_range(1.0..100.0) } else { 0.0 });
        let factors = [
            Factor::ImuTernary {
                poses: [poses[0], poses[1], poses[2]],
                bias: b0,
                info: ternary_information(&pre[i], &pre[i + 1]).map_err(|e| e.to_string())?,
                pre1: Box::new(pre[i]),
                pre2: Box::new(pre[i + 1]),
                gravity,
            },
            Factor::BiasWalk {
                from: b0,
                to: b1,
                info: info6,
            },
            Factor::PosePrior {
                pose: poses[1],
                prior: random_pose(&mut rng, 2.0, 1.0),
                info: info6,
            },
        ];
        for (slot, f) in (2..5).zip(factors) {
            worst[slot] = worst[slot].max(jacobian_error(&g, &f)?);
            counts[slot] += 1;
        }
    }
    let detail = names
        .iter()
        .zip(worst.iter().zip(&counts))
        .map(|(n, (w, c))| format!("{n} {w:.2e} ({c})"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst.iter().all(|w| *w < 1e-5), detail)
}

fn preintegrate_log(log: &MeasurementLog, noise: &ImuNoise) -> Result<Vec<Preintegrated>, String> {
    log.frames
        .windows(2)
        .map(|w| preintegrate(&slice_interval(&log.imu, w[0].t, w[1].t), &ImuBias::zero(), noise))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())
}

fn imu_oracle(scenario: &Scenario, log: &MeasurementLog, pre: &[Preintegrated]) -> Outcome {
    let gt = gt_poses(log);
    let mut worst: f64 = 0.0;
    for i in 0..pre.len() - 1 {
        let r = imu_ternary_residual(
            &gt[i],
            &gt[i + 1],
            &gt[i + 2],
            &pre[i],
            &pre[i + 1],
            &ImuBias::zero(),
            &scenario.world.gravity,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(r.amax());
    }
    check(
        worst < 1e-6,
        format!("{} triples, max component {worst:.3e}", pre.len() - 1),
    )
}

fn centimeter_dims(fsp: &Estimate, scenario: &Scenario, log: &MeasurementLog) -> Outcome {
    let ev = evaluate(scenario, log, &fsp.poses, &fsp.landmarks).map_err(|e| e.to_string())?;
    let w = ev.metrics.width_m.ok_or("no width estimates")?;
    let h = ev.metrics.height_m.ok_or("no height estimates")?;
    check(
        fsp.report.converged && w.count == scenario.world.objects.len() && w.median <= 0.05 && h.median <= 0.05,
        format!(
            "median width error {:.4} m, median height error {:.4} m over {} objects",
            w.median, h.median, w.count
        ),
    )
}

fn parity(fsp: &Estimate, fhp: &Estimate, scenario: &Scenario, log: &MeasurementLog) -> Outcome {
    let ef = evaluate(scenario, log, &fsp.poses, &fsp.landmarks).map_err(|e| e.to_string())?;
    let eh = evaluate(scenario, log, &fhp.poses, &fhp.landmarks).map_err(|e| e.to_string())?;
    let a = ef.metrics.relpose_translation_m.median;
    let b = eh.metrics.relpose_translation_m.median;
    check(
        fhp.report.converged && a <= 2.0 * b && b <= 2.0 * a,
        format!(
            "median relative translation error fsp {a:.4e} m, fhp {b:.4e} m, ratio {:.3}",
            a / b
        ),
    )
}

fn scale(fsp: &Estimate, scenario: &Scenario, log: &MeasurementLog) -> Outcome {
    let ev = evaluate(scenario, log, &fsp.poses, &fsp.landmarks).map_err(|e| e.to_string())?;
    let ratio = ev.metrics.scale_ratio.ok_or("fewer than two landmarks")?;
    check((0.98..=1.02).contains(&ratio), format!("scale ratio {ratio:.5}"))
}

fn state_size(fsp: &Estimate, fhp: &Estimate) -> Outcome {
    let n = fsp.landmarks.len();
    let ok = n > 0
        && fhp.landmarks.len() == n
        && fsp.landmark_dimension == 8 * n
        && fhp.landmark_dimension == 12 * n
        && fhp.graph_dimension - fsp.graph_dimension == 4 * n;
    check(
        ok,
        format!(
            "N={n}: landmark dims fsp {} fhp {}, graph dims fsp {} fhp {}",
            fsp.landmark_dimension, fhp.landmark_dimension, fsp.graph_dimension, fhp.graph_dimension
        ),
    )
}

fn determinism() -> Outcome {
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    for d in &dirs {
        let cfg = RunConfig {
            scenario: scenario_path(),
            log: None,
            mode: Mode::Both,
            out_dir: d.path().to_path_buf(),
            seed: Some(7),
            estimator: EstimatorConfig::default(),
        };
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for n in &names {
        let a = std::fs::read(dirs[0].path().join(n)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(n)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{n} differs between runs"));
        }
    }
    check(
        names.len() == 7,
        format!("{} csv files identical: {}", names.len(), names.join(" ")),
    )
}

fn main() -> ExitCode {
    let scenario = Scenario::load(&scenario_path()).expect("default scenario");
    let k = scenario.sensors.camera.intrinsics().expect("intrinsics");
    let noisy_log = simulate(&scenario).expect("simulation");
    let noiseless_log = simulate(&scenario.noiseless()).expect("simulation");
    let noiseless_pre = preintegrate_log(&noiseless_log, &ImuNoise::default()).expect("preintegration");
    let cfg = EstimatorConfig::default();
    let fsp = estimate(&scenario, &noisy_log, Parameterization::Fsp, &cfg);
    let fhp = estimate(&scenario, &noisy_log, Parameterization::Fhp, &cfg);

    let noisy = |f: &dyn Fn(&Estimate, &Estimate) -> Outcome| -> Outcome {
        match (&fsp, &fhp) {
            (Ok(a), Ok(b)) => f(a, b),
            (Err(e), _) | (_, Err(e)) => Err(format!("estimation failed: {e}")),
        }
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("1 noiseless end-to-end", noiseless_end_to_end(&scenario)),
        ("2 omega invariance", omega_invariance(&k)),
        ("3 omega0 robustness", omega0_sweep(&scenario, &noisy_log)),
        (
            "4 jacobian suite",
            jacobian_suite(&k, &noiseless_log, &noiseless_pre, scenario.world.gravity),
        ),
        (
            "5 zero-residual imu oracle",
            imu_oracle(&scenario, &noiseless_log, &noiseless_pre),
        ),
        (
            "6 centimeter-level dims",
            noisy(&|a, _| centimeter_dims(a, &scenario, &noisy_log)),
        ),
        ("7 fsp/fhp parity", noisy(&|a, b| parity(a, b, &scenario, &noisy_log))),
        ("8 scale observability", noisy(&|a, _| scale(a, &scenario, &noisy_log))),
        ("9 state-size accounting", noisy(&|a, b| state_size(a, b))),
        ("10 determinism", determinism()),
    ];

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
