use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fsp_slam::pipeline::{eval_run, load_scenario, run_pipeline, EstimatorConfig, Mode, RunConfig};
use fsp_slam::simulator::simulate;

#[derive(Parser)]
#[command(
    name = "fsp-slam",
    version,
    about = "Simulate, estimate and evaluate rectangle-landmark VI-SLAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fsp,
    Fhp,
    Both,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fsp => Mode::Fsp,
            ModeArg::Fhp => Mode::Fhp,
            ModeArg::Both => Mode::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a measurement log from a scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the trajectory and landmarks and write results.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Reuse an existing measurement log instead of simulating.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Optimize every N frames while building the graph.
        #[arg(long, default_value_t = 10)]
        incremental: usize,
        /// Initial inverse depth for new landmarks.
        #[arg(long, default_value_t = 0.5)]
        omega0: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute metrics for a finished run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<bool, Box<dyn std::error::Error>> {
    match command {
        Command::Simulate { scenario, out, seed } => {
            let s = load_scenario(&scenario, seed)?;
            let log = simulate(&s)?;
            log.save(&out)?;
            println!(
                "wrote {} frames and {} imu samples to {}",
                log.frames.len(),
                log.imu.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Run {
            scenario,
            log,
            mode,
            out,
            incremental,
            omega0,
            seed,
        } => {
            let config = RunConfig {
                scenario,
                log,
                mode: mode.into(),
                out_dir: out,
                seed,
                estimator: EstimatorConfig {
                    incremental,
                    omega0,
                    ..EstimatorConfig::default()
                },
            };
            let reports = run_pipeline(&config)?;
            let mut ok = true;
            for r in &reports {
                let m = &r.metrics;
                println!(
                    "{}: converged={} ({:?}, {} iterations) rpe_t_median={:.4e} m rpe_r_median={:.4e} rad corner_median={:.4e} m time={:.2}s",
                    r.mode.name(),
                    r.converged,
                    r.optimize.reason,
                    r.optimize.iterations,
                    m.relpose_translation_m.median,
                    m.relpose_rotation_rad.median,
                    m.corner_m.median,
                    r.wall_time_s
                );
                ok &= r.converged;
            }
            Ok(ok)
        }
        Command::Eval { run } => {
            for (param, m) in eval_run(&run)? {
                println!(
                    "{}: rpe_t_median={:.4e} m rpe_r_median={:.4e} rad corner_median={:.4e} m",
                    param.name(),
                    m.relpose_translation_m.median,
                    m.relpose_rotation_rad.median,
                    m.corner_m.median
                );
            }
            Ok(true)
        }
    }
}
