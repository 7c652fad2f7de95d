//! `quatro`: train, sweep, evaluate and verify query-adaptive trust-region
//! policy optimization on synthetic sequence tasks.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors (including an
//! existing output directory) and failed verification, 2 when a training
//! run diverges.

mod config;
mod eval;
mod output;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use quatro_core::metrics::{SimilarityMetric, DEFAULT_FLIP_BINS, DEFAULT_THRESHOLD};
use quatro_core::verify::{run_checks, Fault, VerifyOptions};
use quatro_core::RunStatus;

use crate::config::ExperimentConfig;
use crate::output::create_out_dir;

#[derive(Debug, Parser)]
#[command(name = "quatro", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured synthetic tasks and write run.csv, rollouts and the resolved config.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training job per point of a parameter grid.
    Sweep {
        config: PathBuf,
        /// Axes separated by `;`, values by `,`, e.g. "delta=0.1,0.01;K=1,2,5;lr=0.01".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute Pass@k, UCC@k, unique-correct ratio and optional flip rate from a rollout log.
    Eval {
        rollouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
        k: Vec<usize>,
        #[arg(long, default_value = "tfidf_cosine", value_parser = parse_metric)]
        metric: SimilarityMetric,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Rollouts from the base policy; enables flip_rate.csv.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        /// Run only checks whose id starts with this prefix, e.g. "dual".
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

fn parse_metric(s: &str) -> Result<SimilarityMetric, String> {
    s.parse().map_err(|e: quatro_core::Error| e.to_string())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QUATRO_THREADS") {
        let n: usize = v.parse().with_context(|| format!("QUATRO_THREADS=`{v}` is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn status_code(status: &RunStatus) -> u8 {
    match status {
        RunStatus::Completed => 0,
        RunStatus::Diverged { step } => {
            eprintln!("run diverged at step {step}");
            2
        }
        RunStatus::NonFinite { step, detail } => {
            eprintln!("non-finite values at step {step}: {detail}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?.resolve(seed, out)?;
            let dir = cfg.out_dir()?.to_path_buf();
            create_out_dir(&dir)?;
            let record = train::train_into(&cfg, &dir)?;
            Ok(status_code(&record.status))
        }
        Command::Sweep { config, grid, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?.resolve(seed, out)?;
            let axes = sweep::parse_grid(&grid)?;
            let dir = cfg.out_dir()?.to_path_buf();
            let records = sweep::sweep(&cfg, &axes, &dir)?;
            let diverged = records.iter().filter(|r| r.status != RunStatus::Completed).count();
            if diverged > 0 {
                eprintln!("{diverged} of {} grid points did not complete; see sweep_summary.csv", records.len());
            }
            Ok(0)
        }
        Command::Eval {
            rollouts,
            out,
            k,
            metric,
            threshold,
            baseline,
            bins,
        } => {
            eval::eval(&eval::EvalOptions {
                rollouts: &rollouts,
                baseline: baseline.as_deref(),
                out: &out,
                k,
                metric,
                threshold,
                bins: bins.unwrap_or_else(|| DEFAULT_FLIP_BINS.to_vec()),
            })?;
            Ok(0)
        }
        Command::Verify {
            filter,
            seed,
            inject_fault,
        } => {
            let opts = VerifyOptions {
                filter,
                fault: inject_fault.map(|FaultArg::SignFlip| Fault::FlipAdvantageSign),
                seed,
            };
            let outcomes = run_checks(&opts);
            if outcomes.is_empty() {
                anyhow::bail!("no checks match filter {:?}", opts.filter.unwrap_or_default());
            }
            let width = outcomes.iter().map(|o| o.id.len()).max().unwrap_or(0);
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:<width$}  {}", o.id, o.detail);
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            Ok(u8::from(failed > 0))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
