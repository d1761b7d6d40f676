//! `gbsvie`: solve, compare, verify and refine G-BSVIE problems from JSON
//! problem files.
//!
//! Exit codes: 0 success or PASS, 1 usage, 2 validation, 3 solver,
//! 4 verification FAIL, 5 comparison refused by the hypothesis audit.
//! The worker thread count is read from `GBSVIE_THREADS`.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gbsvie_core::verify::DEFAULT_CMP_TOL;
use gbsvie_core::CompareOptions;

use commands::{Failure, Outcome, PathOptions, EXIT_USAGE};

const THREADS_VAR: &str = "GBSVIE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "gbsvie",
    version,
    about = "Solver suite for backward stochastic Volterra integral equations under G-expectation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PathArgs {
    /// Number of Monte Carlo paths (0 disables path simulation).
    #[arg(long = "paths", default_value_t = 256)]
    n_paths: usize,
    /// Seed of the path generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Euler sub-steps per time step on each path.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    path_substeps: u64,
}

impl PathArgs {
    fn options(&self) -> PathOptions {
        PathOptions {
            n_paths: self.n_paths,
            seed: self.seed,
            substeps: self.path_substeps as usize,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one problem and write the solution fields.
    Solve {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        paths: PathArgs,
        /// Write Z and the optimizer field only for every n-th anchor time.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        anchor_stride: u64,
    },
    /// Solve two problems and check that the first dominates the second.
    Compare {
        spec1: PathBuf,
        spec2: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also record the monotone iteration ladder seeded at the other solution.
        #[arg(long)]
        chained: bool,
        /// Tolerance on the minimum gap.
        #[arg(long, default_value_t = DEFAULT_CMP_TOL)]
        cmp_tol: f64,
    },
    /// Assumption, a priori and continuity reports for one problem.
    Verify {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        paths: PathArgs,
    },
    /// Convergence table over a list of time-step counts.
    Sweep {
        spec: PathBuf,
        /// Comma-separated time-step counts, e.g. 100,200,400.
        #[arg(long, value_delimiter = ',', required = true)]
        nt: Vec<usize>,
        #[arg(short, long)]
        out: PathBuf,
        /// Exact value of Y(0, x0); the finest run is used when absent.
        #[arg(long)]
        reference: Option<f64>,
        /// Space point at which Y(0, .) is read.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        x0: f64,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_VAR} must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err(anyhow!("{THREADS_VAR} must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    match cli.command {
        Command::Solve {
            spec,
            out,
            paths,
            anchor_stride,
        } => commands::cmd_solve(&spec, &out, &paths.options(), anchor_stride as usize),
        Command::Compare {
            spec1,
            spec2,
            out,
            chained,
            cmp_tol,
        } => {
            if !(cmp_tol.is_finite() && cmp_tol >= 0.0) {
                return Err(Failure {
                    code: EXIT_USAGE,
                    error: anyhow!("--cmp-tol must be finite and non-negative"),
                });
            }
            commands::cmd_compare(&spec1, &spec2, &out, &CompareOptions { cmp_tol, chained })
        }
        Command::Verify { spec, out, paths } => commands::cmd_verify(&spec, &out, &paths.options()),
        Command::Sweep {
            spec,
            nt,
            out,
            reference,
            x0,
        } => commands::cmd_sweep(&spec, &nt, &out, x0, reference),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
