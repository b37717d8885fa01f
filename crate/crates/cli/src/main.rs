//! `ufm`: train, certify, escape, inspect and construct unconstrained feature models.
//!
//! Exit codes: 0 global minimum, 2 strict saddle (or escape refused), 3 divergence,
//! 4 not critical, 64 bad usage or config, 65 bad state file, 66 requires `d = K`,
//! 74 output write failure, 1 anything else.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use ufm_core::losses::objective;
use ufm_core::model::{load_state_for, save_direction, save_state};
use ufm_core::{
    build_global_min_ce, build_global_min_mse, certify, collapse_metrics, escape_direction, init_random,
    random_rotation, CertificateReport, DMatrix, LossKind, ModelState, UfmError, Verdict,
};

use config::{ConfigError, ExperimentConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_SADDLE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_NOT_CRITICAL: u8 = 4;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_SCOPE: u8 = 66;
const EXIT_IO: u8 = 74;

const DEFAULT_OUT_DIR: &str = "ufm_out";

#[derive(Parser)]
#[command(name = "ufm", version, about = "Landscape analysis for regularized unconstrained feature models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run gradient descent and write state, trajectory, certificate and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Run seeds `seed .. seed+m` in parallel, one subdirectory each.
        #[arg(long, value_name = "m")]
        seed_sweep: Option<u64>,
    },
    /// Classify a saved state.
    Certify(StateArgs),
    /// Build a negative-curvature direction at a saved strict saddle.
    Escape(StateArgs),
    /// Print neural-collapse metrics of a saved state.
    Metrics(StateArgs),
    /// Construct the ETF global minimizer and its certificate.
    BuildMin(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, value_name = "path")]
    config: PathBuf,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, value_name = "dir")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "path")]
    state: PathBuf,
}

/// A failed command: exit code plus message for stderr.
struct Failure {
    code: u8,
    message: String,
}

type CmdResult = Result<u8, Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(EXIT_USAGE, e.0)
    }
}

fn core_failure(e: UfmError) -> Failure {
    let code = match &e {
        UfmError::InvalidConfig { .. } | UfmError::InvalidSpec(_) => EXIT_USAGE,
        UfmError::Shape { .. } | UfmError::Parse { .. } => EXIT_DATA,
        UfmError::NotSquareCase { .. } => EXIT_SCOPE,
        UfmError::Divergence { .. } => EXIT_DIVERGED,
        UfmError::NotSaddle { .. } => EXIT_SADDLE,
        UfmError::Io(_) => EXIT_IO,
        _ => EXIT_OTHER,
    };
    fail(code, e.to_string())
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    fail(EXIT_IO, format!("cannot write {}: {e}", path.display()))
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::GlobalMin => 0,
        Verdict::StrictSaddle => EXIT_SADDLE,
        Verdict::NotCritical => EXIT_NOT_CRITICAL,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn load_state(path: &Path, cfg: &ExperimentConfig) -> Result<ModelState, Failure> {
    load_state_for(path, &cfg.spec()).map_err(|e| fail(EXIT_DATA, format!("state {}: {e}", path.display())))
}

struct TrainSummary {
    seed: u64,
    code: u8,
    outcome: Option<(Verdict, usize, usize, f64, CertificateReport)>,
}

fn train_one(cfg: &ExperimentConfig, dir: &Path) -> TrainSummary {
    let spec = cfg.spec();
    let opt = cfg.optimizer();
    let seed = opt.seed;
    let result = ufm_core::optimize::run_with(&spec, &opt, init_random(&spec, &opt), &cfg.tolerances());
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            let f = core_failure(e);
            log::error!("seed {seed}: {}", f.message);
            return TrainSummary { seed, code: f.code, outcome: None };
        }
    };
    let written = (|| -> Result<(), Failure> {
        let state_path = dir.join("state.txt");
        save_state(&out.state, &state_path).map_err(|e| io_failure(&state_path, e))?;
        let traj_path = dir.join("trajectory.csv");
        out.trajectory.write_csv(&traj_path).map_err(|e| io_failure(&traj_path, e))?;
        write_file(&dir.join("certificate.json"), &to_json(&out.certificate))?;
        write_file(&dir.join("metrics.json"), &to_json(&collapse_metrics(&out.state, &spec)))
    })();
    if let Err(f) = written {
        log::error!("seed {seed}: {}", f.message);
        return TrainSummary { seed, code: f.code, outcome: None };
    }
    let cert = out.certificate;
    log::info!("seed {seed}: {:?} after {} iterations ({} escapes)", cert.verdict, out.iterations, out.escapes);
    TrainSummary {
        seed,
        code: verdict_code(cert.verdict),
        outcome: Some((cert.verdict, out.iterations, out.escapes, objective(&out.state, &spec), cert)),
    }
}

fn cmd_train(common: &CommonArgs, seed_sweep: Option<u64>) -> CmdResult {
    let cfg = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common, &cfg)?;
    let Some(m) = seed_sweep else {
        let summary = train_one(&cfg, &dir);
        if let Some((.., cert)) = &summary.outcome {
            println!("{}", to_json(cert));
        }
        return Ok(summary.code);
    };
    if m == 0 {
        return Err(fail(EXIT_USAGE, "--seed-sweep must be at least 1"));
    }
    let seeds: Vec<u64> = (0..m).map(|i| cfg.seed.wrapping_add(i)).collect();
    let mut summaries: Vec<TrainSummary> = seeds
        .par_iter()
        .map(|&seed| {
            let run_cfg = ExperimentConfig { seed, ..cfg.clone() };
            let sub = dir.join(format!("seed_{seed}"));
            match fs::create_dir_all(&sub) {
                Ok(()) => train_one(&run_cfg, &sub),
                Err(e) => {
                    log::error!("{}", io_failure(&sub, e).message);
                    TrainSummary { seed, code: EXIT_IO, outcome: None }
                }
            }
        })
        .collect();
    summaries.sort_by_key(|s| s.seed);

    let mut csv = String::from("seed,exit_code,verdict,iterations,escapes,f_value,grad_norm,margin\n");
    for s in &summaries {
        match &s.outcome {
            Some((verdict, iters, escapes, f, cert)) => {
                let _ = writeln!(
                    csv,
                    "{},{},{verdict:?},{iters},{escapes},{f:e},{:e},{:e}",
                    s.seed, s.code, cert.grad_norm, cert.margin
                );
            }
            None => {
                let _ = writeln!(csv, "{},{},,,,,,", s.seed, s.code);
            }
        }
    }
    write_file(&dir.join("sweep.csv"), &csv)?;
    Ok(summaries.iter().map(|s| s.code).max().unwrap_or(0))
}

fn cmd_certify(args: &StateArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.common.config)?;
    let state = load_state(&args.state, &cfg)?;
    let report = certify(&state, &cfg.spec(), &cfg.tolerances()).map_err(core_failure)?;
    println!("{}", to_json(&report));
    Ok(verdict_code(report.verdict))
}

#[derive(Serialize)]
struct EscapeReport {
    predicted_curvature: f64,
    measured_curvature: f64,
}

#[derive(Serialize)]
struct EscapeRefusal {
    error: &'static str,
    verdict: Verdict,
    message: String,
}

fn cmd_escape(args: &StateArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.common.config)?;
    let state = load_state(&args.state, &cfg)?;
    match escape_direction(&state, &cfg.spec(), &cfg.tolerances()) {
        Ok(esc) => {
            let dir = out_dir(&args.common, &cfg)?;
            let path = dir.join("escape.txt");
            save_direction(&esc.direction, &path).map_err(|e| io_failure(&path, e))?;
            println!(
                "{}",
                to_json(&EscapeReport {
                    predicted_curvature: esc.predicted_curvature,
                    measured_curvature: esc.measured_curvature
                })
            );
            Ok(0)
        }
        Err(UfmError::NotSaddle { verdict }) => {
            let message = match verdict {
                Verdict::GlobalMin => "the certificate holds: the point is a global minimizer".to_string(),
                Verdict::NotCritical => {
                    "the point is not critical; escape directions exist only at critical points".to_string()
                }
                Verdict::StrictSaddle => unreachable!("strict saddles are not refused"),
            };
            println!("{}", to_json(&EscapeRefusal { error: "NotSaddle", verdict, message }));
            Ok(EXIT_SADDLE)
        }
        Err(e) => Err(core_failure(e)),
    }
}

fn cmd_metrics(args: &StateArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.common.config)?;
    let spec = cfg.spec();
    let state = load_state(&args.state, &cfg)?;
    println!("{}", to_json(&collapse_metrics(&state, &spec)));
    if !spec.square_case() {
        return Err(core_failure(UfmError::NotSquareCase { k: spec.k, d: spec.d }));
    }
    let report = certify(&state, &spec, &cfg.tolerances()).map_err(core_failure)?;
    Ok(verdict_code(report.verdict))
}

fn cmd_build_min(common: &CommonArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&common.config)?;
    let spec = cfg.spec();
    spec.require_square().map_err(core_failure)?;
    let rotation = match cfg.rotation_seed {
        Some(seed) => random_rotation(spec.k, seed),
        None => DMatrix::identity(spec.k, spec.k),
    };
    let state = match spec.loss {
        LossKind::CrossEntropy => build_global_min_ce(&spec, &rotation),
        LossKind::MeanSquaredError => build_global_min_mse(&spec, &rotation),
    }
    .map_err(core_failure)?;
    let report = certify(&state, &spec, &cfg.tolerances()).map_err(core_failure)?;
    let dir = out_dir(common, &cfg)?;
    let path = dir.join("state.txt");
    save_state(&state, &path).map_err(|e| io_failure(&path, e))?;
    write_file(&dir.join("certificate.json"), &to_json(&report))?;
    println!("{}", to_json(&report));
    Ok(verdict_code(report.verdict))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UFM_LOG", "error")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { common, seed_sweep } => cmd_train(common, *seed_sweep),
        Command::Certify(args) => cmd_certify(args),
        Command::Escape(args) => cmd_escape(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::BuildMin(common) => cmd_build_min(common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("ufm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
