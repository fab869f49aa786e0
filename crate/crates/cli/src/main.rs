//! `pcl`: run, ablate and verify parabolic continual learning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use pcl_core::exec::init_workers;
use pcl_core::experiment::{
    ablation_jobs, aggregate_dir, check_bounds_dir, load_experiment, parse_experiment, run_jobs, run_jobs_in,
    verify_pde, AggregateRow, BundleSummary,
};
use pcl_core::fkpde::suite::Status;
use pcl_core::Exec;

const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "pcl", version, about = "Parabolic continual learning experiments")]
struct Cli {
    /// Worker threads for seeds and Monte Carlo paths.
    #[arg(long, global = true, env = "PCL_WORKERS")]
    workers: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML).
    config: PathBuf,

    /// Override any config key, e.g. `--set run.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method on every seed and write a results bundle.
    Run(ConfigArgs),
    /// Run the bridge-strategy and buffer-filter ablation grid.
    Ablate(ConfigArgs),
    /// Cross-check Feynman-Kac estimates against finite differences.
    VerifyPde {
        /// Take `[pde]` settings from this experiment file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "verify_pde.csv")]
        out: PathBuf,
    },
    /// Check the forgetting and generalization inequalities on a bundle.
    CheckBounds {
        bundle: PathBuf,
        #[arg(long)]
        lipschitz_pairs: Option<usize>,
    },
    /// Recompute runs.csv and aggregate.csv from per-seed files.
    Aggregate { bundle: PathBuf },
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!(
        "{:<40} {:<6} {:>5} {:>15} {:>15}",
        "variant", "method", "seeds", "acc", "aaa"
    );
    for r in rows {
        println!(
            "{:<40} {:<6} {:>5} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}",
            r.variant, r.method, r.n_seeds, r.acc_mean, r.acc_sd, r.aaa_mean, r.aaa_sd
        );
    }
}

fn finish_bundle(summary: &BundleSummary) -> ExitCode {
    print_aggregate(&summary.aggregate);
    println!("bundle written to {}", summary.dir.display());
    if summary.diverged > 0 {
        eprintln!("{} run(s) diverged; see divergence fields in runs/", summary.diverged);
        return ExitCode::from(EXIT_DIVERGED);
    }
    ExitCode::SUCCESS
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    if let Some(n) = cli.workers.filter(|&n| n > 0) {
        init_workers(n);
    }
    match cli.command {
        Command::Run(args) => {
            let exp = load_experiment(&args.config, &args.overrides)?;
            let summary = run_jobs_in(&exp, &run_jobs(&exp.file), exec)?;
            Ok(finish_bundle(&summary))
        }
        Command::Ablate(args) => {
            let exp = load_experiment(&args.config, &args.overrides)?;
            let jobs = ablation_jobs(&exp.file)?;
            let summary = run_jobs_in(&exp, &jobs, exec)?;
            Ok(finish_bundle(&summary))
        }
        Command::VerifyPde {
            config,
            overrides,
            n_paths,
            dt,
            seed,
            out,
        } => {
            let exp = match &config {
                Some(path) => load_experiment(path, &overrides)?,
                None => parse_experiment("", "defaults", &std::env::current_dir()?, &overrides)?,
            };
            let mut opts = exp.file.pde;
            opts.n_paths = n_paths.unwrap_or(opts.n_paths);
            opts.dt = dt.unwrap_or(opts.dt);
            opts.seed = seed.unwrap_or(opts.seed);
            let rows = verify_pde(&opts, &out, exec)?;
            for r in &rows {
                println!(
                    "{:<16} x0={:<5} fd={:.5} fk={:.5} ± {:.5} {:?}",
                    r.problem_id, r.x0, r.fd_value, r.fk_value, r.stderr, r.status
                );
            }
            let failed = rows.iter().filter(|r| r.status == Status::Fail).count();
            println!("{} rows, {failed} failed; written to {}", rows.len(), out.display());
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            })
        }
        Command::CheckBounds {
            bundle,
            lipschitz_pairs,
        } => {
            let outcome = check_bounds_dir(&bundle, lipschitz_pairs)
                .with_context(|| format!("checking bounds in {}", bundle.display()))?;
            for ((variant, method), (ok, n)) in &outcome.groups {
                println!("{variant} {method}: both patterns hold for {ok}/{n} seeds");
            }
            println!(
                "{} rows written to {}",
                outcome.rows.len(),
                bundle.join("bounds.csv").display()
            );
            Ok(if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            })
        }
        Command::Aggregate { bundle } => {
            let (_, rows) = aggregate_dir(&bundle)?;
            print_aggregate(&rows);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
