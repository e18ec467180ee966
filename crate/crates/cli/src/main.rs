//! `roetrace`: configuration, command dispatch and artifact emission.
//!
//! Exit status: 0 success, 1 suite or numerical failure, 2 usage or
//! configuration error. `ROETRACE_THREADS` caps the worker count.

mod commands;
mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Failure, RunConfig};
use output::Run;
use verify::Status;

#[derive(Parser, Debug)]
#[command(name = "roetrace", version, about = "Trace functionals on coarse spaces: heat traces, spectral densities, invariant suites")]
struct Cli {
    /// Bundled profile used as the base configuration (z1, z2, strip).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// INI configuration file layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `section.key=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default `roetrace-out/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Space models and exhaustions.
    Space {
        #[command(subcommand)]
        action: SpaceAction,
    },
    /// Trace functionals.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Heat traces.
    Heat {
        #[command(subcommand)]
        action: HeatAction,
    },
    /// Spectral densities and exponents.
    Spectral {
        #[command(subcommand)]
        action: SpectralAction,
    },
    /// Invariant suites.
    Verify {
        #[command(subcommand)]
        action: VerifyAction,
    },
}

#[derive(Subcommand, Debug)]
enum SpaceAction {
    /// Exhaustion sizes, volumes and regularity ratios.
    Build,
}

#[derive(Subcommand, Debug)]
enum TraceAction {
    /// Value of the trace functional on the configured operator.
    Phi,
    /// Supremum of the mollified functionals over the δ-schedule.
    Regularized,
    /// Annulus-kernel sequence with vanishing traces and a nonzero limit.
    Counterexample,
}

#[derive(Subcommand, Debug)]
enum HeatAction {
    /// Per-volume heat trace on the `[heat]` time grid.
    Theta,
}

#[derive(Subcommand, Debug)]
enum SpectralAction {
    /// Spectral density function on the `[spectral]` grid.
    Dos,
    /// L²-Betti number and Novikov–Shubin exponents.
    Ns,
}

#[derive(Subcommand, Debug)]
enum VerifyAction {
    /// Every invariant suite on the configured space.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Space { action: SpaceAction::Build } => "space build",
            Command::Trace { action: TraceAction::Phi } => "trace phi",
            Command::Trace { action: TraceAction::Regularized } => "trace regularized",
            Command::Trace { action: TraceAction::Counterexample } => "trace counterexample",
            Command::Heat { action: HeatAction::Theta } => "heat theta",
            Command::Spectral { action: SpectralAction::Dos } => "spectral dos",
            Command::Spectral { action: SpectralAction::Ns } => "spectral ns",
            Command::Verify { action: VerifyAction::All } => "verify all",
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match (&cli.profile, &cli.config) {
        (Some(p), _) => RunConfig::profile(p)?,
        (None, Some(_)) => RunConfig::default(),
        (None, None) => RunConfig::profile("z1")?,
    };
    if let Some(path) = &cli.config {
        cfg.merge(&RunConfig::load(path)?);
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn threads() -> Result<usize, ConfigError> {
    match std::env::var("ROETRACE_THREADS") {
        Err(_) => Ok(rayon::current_num_threads()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| ConfigError(format!("thread pool: {e}")))?;
                Ok(n)
            }
            _ => Err(ConfigError(format!("ROETRACE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let name = cli.command.name();
    let cfg = build_config(cli)?;
    let threads = threads()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("roetrace-out").join(name.replace(' ', "-")));
    let run = Run::new(&out, name, cfg, threads)?;
    let result = match &cli.command {
        Command::Space { .. } => commands::space_build(&run),
        Command::Trace { action: TraceAction::Phi } => commands::trace_phi(&run),
        Command::Trace { action: TraceAction::Regularized } => commands::trace_regularized(&run),
        Command::Trace { action: TraceAction::Counterexample } => commands::trace_counterexample(&run),
        Command::Heat { .. } => commands::heat_theta(&run),
        Command::Spectral { action: SpectralAction::Dos } => commands::spectral_dos(&run),
        Command::Spectral { action: SpectralAction::Ns } => commands::spectral_ns(&run),
        Command::Verify { .. } => verify_all(&run),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(f) => format!("error {}: {}", f.code, f.message),
    };
    run.finish(&status)?;
    if result.is_ok() {
        println!("{name}: artifacts in {}", out.display());
    }
    result
}

fn verify_all(run: &Run) -> Result<(), Failure> {
    let results = verify::verify_all(run)?;
    let mut failed = 0;
    for r in &results {
        println!("{:<5} {:<15} {}", r.status.label().to_uppercase(), r.name, r.detail);
        if r.status == Status::Fail {
            failed += 1;
        }
    }
    println!("verify: {} passed, {failed} failed, {} skipped", results.iter().filter(|r| r.status == Status::Pass).count(), results.iter().filter(|r| r.status == Status::Skip).count());
    if failed > 0 {
        return Err(Failure::runtime(format!("verify: {failed} suite(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("roetrace: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
