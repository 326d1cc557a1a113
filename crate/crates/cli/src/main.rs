//! `adl`: batch front end for the auto-deleveraging solvers.
//!
//! Exit status is 0 when every solve met its tolerance, 1 when a solve
//! finished outside tolerance and 2 on errors.

mod commands;
mod io;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{Common, FactorArgs, Law, MultiArgs, SingleArgs};

#[derive(Parser)]
#[command(name = "adl", version, about = "Risk-optimal auto-deleveraging allocations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Water-filling allocation for isolated single-asset shorts.
    SolveSingle {
        #[arg(long)]
        accounts: PathBuf,
        #[command(flatten)]
        law: Law,
        /// Total contracts to close.
        #[arg(long)]
        q: f64,
        /// `expected`, `cvar:<beta>` or `spectral:<beta>:<w>,...`.
        #[arg(long)]
        spec: Option<String>,
        /// Shorthand for `--spec cvar:<beta>`.
        #[arg(long)]
        beta: Option<f64>,
        /// Points in the leverage sweep from 0 to Q.
        #[arg(long, default_value_t = 20)]
        sweep: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Expected-loss allocation for cross-margin portfolios by dual ascent.
    SolveMulti {
        #[arg(long)]
        accounts: PathBuf,
        #[command(flatten)]
        law: Law,
        /// Target reduction per asset, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        q: Vec<f64>,
        /// Also report the CVaR of the aggregate loss at this level.
        #[arg(long)]
        beta: Option<f64>,
        /// Only `expected` is solved for several assets.
        #[arg(long, default_value = "expected")]
        spec: String,
        /// Scenarios drawn when the model has no closed form.
        #[arg(long = "n-scenarios", default_value_t = 10_000)]
        n_scenarios: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Clipped water-filling on factor leverage.
    SolveFactor {
        #[arg(long)]
        accounts: PathBuf,
        /// `single_factor` model, or `bivariate_gbm` to calibrate one.
        #[arg(long)]
        model: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        q: Vec<f64>,
        /// Solve the expected-loss problem and print its interior-coverage edges.
        #[arg(long)]
        check_connectivity: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Property harness for the queue, pro-rata and water-filling policies.
    ComparePolicies {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Also write each policy's allocation for these accounts.
        #[arg(long, requires_all = ["q", "p_tau"])]
        accounts: Option<PathBuf>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long = "p-tau")]
        p_tau: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Leading eigenpair of a bivariate GBM increment covariance.
    CalibrateFactor {
        #[arg(long)]
        model: String,
        /// Also tabulate factor and gross leverage of these accounts.
        #[arg(long)]
        accounts: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate the bundled tables and figure data.
    Reproduce {
        #[arg(long = "n-scenarios", default_value_t = 10_000)]
        n_scenarios: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn configure_workers() -> Result<()> {
    if let Ok(raw) = std::env::var("ADL_NUM_WORKERS") {
        let n: usize = raw.trim().parse().with_context(|| format!("ADL_NUM_WORKERS={raw:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_workers()?;
    match cli.command {
        Command::SolveSingle {
            accounts,
            law,
            q,
            spec,
            beta,
            sweep,
            common,
        } => {
            let spec = commands::risk_spec(spec.as_deref(), beta)?;
            commands::solve_single_cmd(
                SingleArgs {
                    accounts: &accounts,
                    law: &law,
                    q,
                    spec,
                    sweep,
                },
                &common,
            )
        }
        Command::SolveMulti {
            accounts,
            law,
            q,
            beta,
            spec,
            n_scenarios,
            common,
        } => {
            let spec: adl_core::RiskSpec = spec.parse()?;
            anyhow::ensure!(
                spec == adl_core::RiskSpec::Expected,
                "several assets are solved for expected loss only; use --beta to evaluate CVaR"
            );
            commands::solve_multi_cmd(
                MultiArgs {
                    accounts: &accounts,
                    law: &law,
                    q: &q,
                    beta,
                    n_scenarios,
                },
                &common,
            )
        }
        Command::SolveFactor {
            accounts,
            model,
            q,
            check_connectivity,
            common,
        } => commands::solve_factor_cmd(
            FactorArgs {
                accounts: &accounts,
                model: &model,
                q: &q,
                check_connectivity,
            },
            &common,
        ),
        Command::ComparePolicies {
            trials,
            accounts,
            q,
            p_tau,
            common,
        } => {
            let allocate = match (&accounts, q, p_tau) {
                (Some(path), Some(q), Some(p)) => Some((path.as_path(), q, p)),
                _ => None,
            };
            commands::compare_policies_cmd(trials, allocate, &common)
        }
        Command::CalibrateFactor { model, accounts, common } => commands::calibrate_cmd(&model, accounts.as_deref(), &common),
        Command::Reproduce { n_scenarios, common } => reproduce::reproduce_cmd(n_scenarios, &common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("adl: a solve finished outside tolerance");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("adl: {e:#}");
            ExitCode::from(2)
        }
    }
}
