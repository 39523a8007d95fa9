use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use stopctrl::cli::{self, RunConfig};

/// Value function and optimal strategies of a zero-sum stopper vs.
/// singular-controller game with absorption at zero.
#[derive(Parser)]
#[command(name = "stopctrl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions of a model on a scan grid.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Exit 0 even when some assumption fails.
        #[arg(long)]
        allow_violations: bool,
    },
    /// Run the limit schedule and write value/regions/boundaries artifacts.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Solve a single schedule stage instead of the full limit chain.
        #[arg(long)]
        stage_only: Option<usize>,
    },
    /// Monte Carlo saddle-point checks against solved artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the RNG seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify the variational inequality on solved artifacts.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<i32, stopctrl::Error> {
    match Cli::parse().command {
        Command::Validate {
            config,
            allow_violations,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let (code, _) = cli::cmd_validate(&cfg, allow_violations)?;
            Ok(code)
        }
        Command::Solve {
            config,
            out,
            stage_only,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let solution = cli::cmd_solve(&cfg, stage_only, out.as_deref())?;
            println!(
                "solved: {} stage(s), mesh error {:.3e}, error estimate {:.3e}",
                solution.diagnostics.stage_diffs.len() + 1,
                solution.diagnostics.mesh_error,
                solution.diagnostics.error_estimate
            );
            Ok(0)
        }
        Command::Simulate { config, out, seed } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = cli::cmd_simulate(&cfg, out.as_deref(), seed)?;
            for p in &report.points {
                println!(
                    "start ({}, {}): value {:.5}, equilibrium gap {:.4e}, passed: {}",
                    p.t0, p.x0, p.value, p.equilibrium_gap, p.passed
                );
            }
            Ok(if report.all_passed() { 0 } else { 1 })
        }
        Command::Verify { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let ok = cli::cmd_verify(&cfg, out.as_deref())?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for(&err) as u8)
        }
    }
}
