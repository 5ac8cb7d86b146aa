//! `hprompt`: train, evaluate and compare hierarchical-prompt runs.
//!
//! Exit codes: 0 ok, 1 config error, 2 runtime failure, 3 check failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use log::{info, warn};

use hprompt_core::harness::{self, ExperimentConfig, Preset};
use hprompt_core::trainer::Mode;
use hprompt_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hprompt", version, about = "Hierarchical prompts for rehearsal-free continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain (or load) the backbone and train every task into a run directory.
    Train {
        /// JSON experiment config; defaults to the desk preset.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Override the config's mode: hprompts, tgp, tp or ftseq.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-run inference over every test split of a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Use each test image's true task instead of the predicted one.
        #[arg(long)]
        oracle_task_id: bool,
    },
    /// Compare runs: mean ± std of A_T, F_T and the upper-bound gap per mode.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Exit with code 3 when the expected ordering is violated.
        #[arg(long)]
        strict: bool,
    },
    /// Finite-difference check of every primitive and loss path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = hprompt_core::diffcore::DEFAULT_TOL)]
        tol: f64,
    },
    /// Check a run directory against its recorded checksums.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a preset config as JSON.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        mode: Option<String>,
    },
}

/// A check ran and failed, as opposed to an error while running it.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(config: Option<PathBuf>, preset: Option<String>, mode: Option<String>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_file(&p)?,
        None => ExperimentConfig::preset(preset.as_deref().unwrap_or("desk").parse::<Preset>()?),
    };
    if let Some(m) = mode {
        cfg.train.mode = m.parse::<Mode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads_from_env() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("HPROMPT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HPROMPT_THREADS must be a positive integer, got {v:?}")))?;
    harness::configure_threads(n)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    threads_from_env()?;
    match cli.command {
        Command::Train { config, preset, mode, out, seed, force } => {
            let cfg = load_config(config, preset, mode)?;
            info!("training {} ({}) seed {seed} into {}", cfg.name, cfg.train.mode, out.display());
            let s = harness::train(&cfg, seed, &out, force)?;
            println!("{}", serde_json::to_string_pretty(&s.metrics)?);
            info!("finished in {:.1}s", s.seconds);
        }
        Command::Eval { run, oracle_task_id } => {
            let s = harness::eval(&run, oracle_task_id)?;
            if !s.reproduces_stored {
                warn!("recomputed final accuracy row differs from the stored one");
            }
            println!("{}", serde_json::to_string_pretty(&s.metrics)?);
        }
        Command::Report { runs, csv, strict } => {
            let r = harness::report_runs(&runs)?;
            print!("{}", harness::report_to_text(&r));
            if let Some(p) = csv {
                fs::write(&p, harness::report_to_csv(&r)).with_context(|| format!("writing {}", p.display()))?;
            }
            if strict && !r.violations.is_empty() {
                return Err(CheckFailed(format!("{} ordering violation(s)", r.violations.len())).into());
            }
        }
        Command::Gradcheck { seed, instances, tol } => {
            let r = harness::run_gradcheck_suite(seed, instances, tol)?;
            for name in harness::check_names() {
                let mine: Vec<_> = r.outcomes.iter().filter(|o| o.name == name).collect();
                let worst = mine.iter().map(|o| o.max_error).fold(0.0, f64::max);
                let ok = mine.iter().all(|o| o.passed);
                println!("{} {name:<28} max rel err {worst:.2e}", if ok { "PASS" } else { "FAIL" });
            }
            println!("{} checks in {:.2}s", r.outcomes.len(), r.seconds);
            if !r.passed() {
                return Err(CheckFailed(format!("{} gradient check(s) failed", r.failures().len())).into());
            }
        }
        Command::Verify { run } => {
            let bad = harness::verify_run(&run)?;
            if !bad.is_empty() {
                return Err(CheckFailed(format!("checksum mismatch: {}", bad.join(", "))).into());
            }
            println!("all artifacts match");
        }
        Command::Config { preset, mode } => {
            let cfg = load_config(None, Some(preset), mode)?;
            print!("{}", cfg.to_json()?);
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        3
    } else if matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
