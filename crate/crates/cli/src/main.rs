//! `fedleak` command-line runner.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while a command runs. `FEDLEAK_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use fedleak_core::experiment::{run_command, Command, ExperimentConfig};
use fedleak_core::CoreError;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Partition,
    Train,
    Attack,
    Account,
    Evaluate,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Partition => Command::Partition,
            Cmd::Train => Command::Train,
            Cmd::Attack => Command::Attack,
            Cmd::Account => Command::Account,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Report => Command::Report,
        }
    }
}

/// Federated-learning gradient leakage experiments.
#[derive(Debug, Parser)]
#[command(name = "fedleak", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory shared by all commands of one run.
    #[arg(long)]
    out: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("fedleak: {msg}");
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("FEDLEAK_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("FEDLEAK_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(USAGE, e);
    }
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(USAGE, format!("{}: {e}", args.config.display())),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let cmd = Command::from(args.command);
    match run_command(cmd, &cfg, &args.out) {
        Ok(rec) => {
            println!(
                "{} done in {:.1} s, {} files, config {}",
                cmd.name(),
                rec.wall_clock_s,
                rec.files.len(),
                &rec.config_hash[..12]
            );
            ExitCode::SUCCESS
        }
        Err(e @ CoreError::Config(_)) => fail(USAGE, e),
        Err(e) => fail(RUNTIME, e),
    }
}
