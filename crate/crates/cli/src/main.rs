use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use noisy_fedavg::channel::NoiseDistribution;
use noisy_fedavg_cli::experiments::{format_summary, run_experiment, write_outputs};
use noisy_fedavg_cli::io::write_atomic;
use noisy_fedavg_cli::sweep::{format_table, parse_values, sweep};
use noisy_fedavg_cli::verify::{format_report, verify, Scope, VerifyOptions};
use noisy_fedavg_cli::{ExperimentFile, UsageError};

#[derive(Parser, Debug)]
#[command(
    name = "noisy-fedavg",
    version,
    about = "FedAvg over noisy channels: runs, sweeps and checks"
)]
struct Cli {
    /// Base seed (replica i uses seed + i).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replica count for runs and sweeps; Monte-Carlo replicas for `verify`.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for concurrent replicas.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every replica of an experiment file.
    Run { file: PathBuf },
    /// Run the oracle and rate-check suites.
    Verify {
        #[arg(value_enum)]
        scope: Scope,
        /// Scale every scheduled noise variance of the rate checks.
        #[arg(long, default_value_t = 1.0)]
        noise_multiplier: f64,
        /// Seeds per rate check.
        #[arg(long)]
        theorem_seeds: Option<usize>,
        /// Noise distributions for the rate checks (repeatable).
        #[arg(long = "distribution", value_parser = parse_distribution)]
        distributions: Vec<NoiseDistribution>,
    },
    /// Run an experiment once per value of one numeric field.
    Sweep {
        file: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
}

fn parse_distribution(s: &str) -> Result<NoiseDistribution, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown distribution `{s}` (gaussian, uniform, laplace)"))
}

fn load(cli: &Cli, file: &Path) -> anyhow::Result<ExperimentFile> {
    let mut exp = ExperimentFile::load(file)?;
    if let Some(seed) = cli.seed {
        exp.run.seed = seed;
    }
    if let Some(r) = cli.replicas {
        if r == 0 {
            return Err(UsageError("--replicas must be at least 1".into()).into());
        }
        exp.replicas = r;
    }
    Ok(exp)
}

fn out_dir(cli: &Cli, exp: Option<&ExperimentFile>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| exp.and_then(|e| e.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Run { file } => {
            let exp = load(cli, file)?;
            let task = exp.build_task()?;
            let result = run_experiment(&exp, &task, cli.workers)?;
            let dir = out_dir(cli, Some(&exp));
            write_outputs(&result, &dir)?;
            print!("{}", format_summary(&result.summary));
            println!("wrote {}", dir.display());
            Ok(result.passed())
        }
        Command::Verify {
            scope,
            noise_multiplier,
            theorem_seeds,
            distributions,
        } => {
            let opts = VerifyOptions {
                seed: cli.seed.unwrap_or(0),
                replicas: cli.replicas,
                theorem_replicas: *theorem_seeds,
                noise_multiplier: *noise_multiplier,
                distributions: if distributions.is_empty() {
                    vec![NoiseDistribution::Gaussian]
                } else {
                    distributions.clone()
                },
                workers: cli.workers,
            };
            let reports = verify(*scope, &opts)?;
            print!("{}", format_report(&reports));
            if let Some(dir) = &cli.out {
                write_atomic(
                    &dir.join("verify.json"),
                    serde_json::to_string_pretty(&reports)?.as_bytes(),
                )?;
            }
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::Sweep { file, axis, values } => {
            let exp = load(cli, file)?;
            let values = parse_values(values)?;
            let dir = out_dir(cli, Some(&exp));
            let (rows, _) = sweep(&exp, axis, &values, cli.workers, Some(&dir))?;
            print!("{}", format_table(axis, &rows));
            Ok(rows.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
