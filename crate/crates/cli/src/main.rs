use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedcomp::CompressorKind;
use fedcomp_cli::config::SEED_ENV;
use fedcomp_cli::{bench_compressor, load_config, load_vector, partition_report, run, save_vector, schedule_report};

#[derive(Parser)]
#[command(name = "fedcomp", version, about = "Federated learning simulator with compressed communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (TOML sections: dataset, model, federation, compression, schedule).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set federation.rounds=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-round metrics as CSV.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV path; overrides `output` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the final global weights, one value per line.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Print the per-client class histograms of the partition.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the budget schedule of one client.
    SolveSchedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        client: usize,
    },
    /// Compress a saved vector once and report ratio and efficiency.
    BenchCompressor {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Whitespace-separated values.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `compression.uplink`.
        #[arg(long)]
        compressor: Option<String>,
        /// Defaults to `compression.budget`.
        #[arg(long)]
        budget: Option<usize>,
    },
}

fn load(args: &ConfigArgs) -> Result<fedcomp_cli::ExperimentConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    load_config(args.config.as_deref(), &args.overrides, env_seed.as_deref())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            cfg,
            output,
            save_weights,
        } => {
            let cfg = load(&cfg)?;
            let (csv, weights) = run(&cfg)?;
            match output.or(cfg.output) {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            if let Some(p) = save_weights {
                save_vector(&p, &weights)?;
            }
        }
        Command::Partition { cfg } => print!("{}", partition_report(&load(&cfg)?)?),
        Command::SolveSchedule { cfg, client } => print!("{}", schedule_report(&load(&cfg)?, client)?),
        Command::BenchCompressor {
            cfg,
            input,
            compressor,
            budget,
        } => {
            let cfg = load(&cfg)?;
            let kind: CompressorKind = match compressor {
                Some(name) => name.parse()?,
                None => cfg.uplink()?,
            };
            let target = load_vector(&input)?;
            print!("{}", bench_compressor(&cfg, &target, kind, budget.unwrap_or(cfg.compression.budget))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
