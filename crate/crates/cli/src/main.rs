//! `ellada`: runs the distributed solver on a single problem (`solve`) or
//! the quadruple-tank controllers in closed loop (`closed-loop`).
//!
//! Exit codes: 0 on success, 1 on errors (bad flags, bad configuration,
//! solver failures), 2 when a run stopped early (outer iteration cap,
//! missing certificate, failed controller). Partial logs are still written.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ellada_core::runtime::ExecutionMode;
use ellada_core::schedule::Variant;

use crate::commands::{CliError, Outcome};
use crate::config::{Command, Finals, PlotFormat, ProblemKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "ellada",
    version,
    about = "Distributed nonconvex solver and quadruple-tank benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one problem and write its iteration log.
    Solve(Overrides),
    /// Simulate the tank controllers in closed loop.
    ClosedLoop(Overrides),
}

/// Flags override the configuration file, which overrides the built-in defaults.
#[derive(clap::Args)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    problem: Option<ProblemKind>,
    /// QP description for `--problem file`.
    #[arg(long)]
    problem_file: Option<PathBuf>,
    /// ell, ella or ellada.
    #[arg(long)]
    algo: Option<Variant>,
    #[arg(long, value_enum)]
    finals: Option<Finals>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Closed-loop sampling instants.
    #[arg(long)]
    steps: Option<usize>,
    /// `sync` or `async:S`.
    #[arg(long)]
    mode: Option<ExecutionMode>,
    #[arg(long, value_enum)]
    plot: Option<PlotFormat>,
}

impl Overrides {
    fn apply(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => config::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.problem {
            cfg.problem = v;
        }
        if let Some(v) = self.problem_file {
            cfg.problem_file = Some(v);
        }
        if let Some(v) = self.algo {
            if v != cfg.algo {
                // schedules of the configured variant do not carry over
                cfg.schedule = None;
                cfg.barrier = None;
            }
            cfg.algo = v;
        }
        if let Some(v) = self.finals {
            cfg.finals = Some(v);
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.tank.steps = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.plot {
            cfg.plot = v;
        }
        Ok(cfg)
    }
}

fn execute(cmd: Cmd) -> Result<Outcome, CliError> {
    let (command, overrides) = match cmd {
        Cmd::Solve(o) => (Command::Solve, o),
        Cmd::ClosedLoop(o) => (Command::ClosedLoop, o),
    };
    let mut cfg = overrides.apply()?;
    cfg.resolve(command);
    cfg.validate()?;
    commands::prepare_output(&cfg)?;
    match command {
        Command::Solve => commands::solve(&cfg),
        Command::ClosedLoop => commands::closed_loop(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap's own usage exit code would collide with "stopped early"
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Stopped(reason)) => {
            eprintln!("stopped: {reason}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
