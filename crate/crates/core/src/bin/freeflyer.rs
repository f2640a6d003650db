//! Command-line entry point: scenarios, training, benchmarking and log replay.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical or
//! solver failure, 3 replay verification mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use freeflyer::rl::{self, TrainConfig};
use freeflyer::sim::{self, EpisodeSummary, FailureMode, ScenarioConfig};
use freeflyer::vec_env::{self, BenchConfig};
use freeflyer::Error;

const OUT_ENV: &str = "FREEFLYER_OUT";

#[derive(Parser)]
#[command(name = "freeflyer", version, about = "Free-flyer proximity-operations simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if absent.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config when given.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Run the canonical inspection scenario under a thruster condition.
    Inspect {
        #[arg(long, value_enum, default_value = "nominal")]
        failure: Failure,
        #[command(flatten)]
        common: Common,
    },
    /// Run the canonical docking scenario.
    Dock {
        #[command(flatten)]
        common: Common,
    },
    /// Train a PPO policy on the setpoint task.
    Train {
        /// JSON training config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        total_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Measure batched rollout throughput.
    Bench {
        /// Comma-separated batch sizes; the first is the reference row.
        #[arg(long, value_delimiter = ',', default_value = "128")]
        envs: Vec<usize>,
        #[arg(long, default_value_t = 512)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        dt: f64,
        /// Step environments on a single thread.
        #[arg(long)]
        serial: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute a summary from a log and compare it with the stored one.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Stored summary; defaults to summary.json next to the log.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Failure {
    Nominal,
    StuckOff,
    StuckOn,
}

impl From<Failure> for FailureMode {
    fn from(f: Failure) -> Self {
        match f {
            Failure::Nominal => FailureMode::Nominal,
            Failure::StuckOff => FailureMode::StuckOff,
            Failure::StuckOn => FailureMode::StuckOn,
        }
    }
}

/// Failure tagged with the stage that produced it.
struct Failed {
    stage: &'static str,
    error: Error,
}

type CmdResult = Result<(), Failed>;

fn at(stage: &'static str) -> impl Fn(Error) -> Failed {
    move |error| Failed { stage, error }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Mismatch(_) => 3,
        _ if e.is_numerical() => 2,
        _ => 1,
    }
}

fn prepare_out(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failed { stage: "output", error: e.into() })
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failed { stage: "output", error: e.into() })
}

fn summary_json(s: &EpisodeSummary) -> String {
    serde_json::to_string_pretty(s).expect("summary serializes") + "\n"
}

/// Runs `cfg`, writing `log.csv` and `summary.json`; a failed run still
/// writes the partial log.
fn run_and_write(cfg: &ScenarioConfig, out: &Path) -> Result<EpisodeSummary, Failed> {
    prepare_out(out)?;
    match sim::run_episode(cfg) {
        Ok(ep) => {
            if cfg.log.write_csv {
                write(&out.join("log.csv"), &sim::write_log_csv(&ep.log, cfg))?;
            }
            write(&out.join("summary.json"), &summary_json(&ep.summary))?;
            Ok(ep.summary)
        }
        Err(fail) => {
            write(&out.join("log.csv"), &sim::write_log_csv(&fail.log, cfg))?;
            Err(Failed { stage: "episode", error: fail.error })
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |t| format!("{t:.3}"))
}

fn simulate(config: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| Failed { stage: "config", error: e.into() })?;
    let mut cfg = sim::load_config(&text).map_err(at("config"))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(at("config"))?;
    let s = run_and_write(&cfg, out)?;
    println!(
        "steps={} mean_lateral_error={:.4} mean_control_effort={:.4} final_position_error={:.4e} total_reward={:.3}",
        s.steps, s.mean_lateral_error, s.mean_control_effort, s.final_position_error, s.total_reward
    );
    Ok(())
}

fn inspect(failure: Failure, common: &Common) -> CmdResult {
    let mut cfg = sim::inspection_config(failure.into());
    cfg.seed = common.seed;
    let s = run_and_write(&cfg, &common.out)?;
    let label = match failure {
        Failure::Nominal => "nominal",
        Failure::StuckOff => "stuck-off",
        Failure::StuckOn => "stuck-on",
    };
    println!(
        "condition={label} mean_lateral_error_m={:.4} max_lateral_error_m={:.4} mean_control_effort={:.2}",
        s.mean_lateral_error, s.max_lateral_error, s.mean_control_effort
    );
    Ok(())
}

fn dock(common: &Common) -> CmdResult {
    let cfg = sim::docking_config(common.seed);
    let s = run_and_write(&cfg, &common.out)?;
    let stage = s.first_contact_stage.map_or_else(|| "none".into(), |st| format!("{st:?}"));
    println!(
        "rendezvous={} docked={} first_contact_t={} first_contact_stage={stage} peak_force_n={:.3} final_position_error_m={:.4e} settle_t={}",
        s.rendezvous_success,
        s.dock_success,
        fmt_opt(s.first_contact_time),
        s.peak_contact_force,
        s.final_position_error,
        fmt_opt(s.settle_time)
    );
    Ok(())
}

fn train(config: Option<&Path>, total_steps: Option<usize>, common: &Common) -> CmdResult {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failed { stage: "config", error: e.into() })?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Failed {
                stage: "config",
                error: Error::Parse { line: e.line(), column: e.column(), message: e.to_string() },
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = total_steps {
        cfg.total_steps = n;
    }
    cfg.seed = common.seed;
    cfg.checkpoint_dir = Some(common.out.clone());
    cfg.validate().map_err(at("config"))?;
    prepare_out(&common.out)?;
    let outcome = rl::train(&cfg).map_err(at("train"))?;
    write(&common.out.join("curve.csv"), &rl::curve_csv(&outcome.curve))?;
    match outcome.curve.last() {
        Some(last) => println!(
            "iterations={} env_steps={} eval_final_distance={} checkpoint={}",
            outcome.curve.len(),
            last.env_steps,
            fmt_opt(last.eval_final_distance),
            common.out.join("policy.ffrl").display()
        ),
        None => println!("iterations=0 env_steps=0 checkpoint={}", common.out.join("policy.ffrl").display()),
    }
    Ok(())
}

fn bench(envs: Vec<usize>, steps: usize, dt: f64, serial: bool, common: &Common) -> CmdResult {
    let cfg = BenchConfig { n_envs_list: envs, steps, dt, seed: common.seed, parallel: !serial, ..BenchConfig::default() };
    let reports = vec_env::run_benchmark(&cfg).map_err(at("bench"))?;
    prepare_out(&common.out)?;
    let csv = vec_env::bench_csv(&reports);
    write(&common.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn replay(log: &Path, summary: Option<&Path>) -> CmdResult {
    let summary_path = summary.map_or_else(|| log.with_file_name("summary.json"), Path::to_path_buf);
    let text = fs::read_to_string(log).map_err(|e| Failed { stage: "replay", error: e.into() })?;
    let stored_text = fs::read_to_string(&summary_path).map_err(|e| Failed { stage: "replay", error: e.into() })?;
    let stored: EpisodeSummary = serde_json::from_str(&stored_text).map_err(|e| Failed {
        stage: "replay",
        error: Error::Parse { line: e.line(), column: e.column(), message: e.to_string() },
    })?;
    let offline = sim::verify_log(&text, &stored).map_err(at("replay"))?;
    println!("verified steps={} total_reward={:.6}", offline.steps, offline.total_reward);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate { config, seed, out } => simulate(config, *seed, out),
        Command::Inspect { failure, common } => inspect(*failure, common),
        Command::Dock { common } => dock(common),
        Command::Train { config, total_steps, common } => train(config.as_deref(), *total_steps, common),
        Command::Bench { envs, steps, dt, serial, common } => bench(envs.clone(), *steps, *dt, *serial, common),
        Command::Replay { log, summary } => replay(log, summary.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failed { stage, error }) => {
            eprintln!("error: {stage}: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
