//! `sdbcd`: simulate spatial data, fit the low-rank model over a simulated
//! machine network, and run prediction, interval and smoothness workflows.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(name = "sdbcd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat TOML file of configuration keys; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of machines J.
    #[arg(long, global = true)]
    machines: Option<usize>,

    /// `er:<p>`, `complete`, or an `i,j` edge-list file.
    #[arg(long, global = true, value_name = "er:P|complete|FILE")]
    topology: Option<String>,

    /// Gossip rounds per consensus step.
    #[arg(long = "K", global = true)]
    k: Option<usize>,

    /// Outer iterations.
    #[arg(long = "T", global = true)]
    t: Option<usize>,

    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads for per-machine work (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// `central` also fits the pooled data and traces the error against it.
    #[arg(long, global = true, value_parser = ["none", "central"])]
    reference: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate a dataset and knot set.
    GenData,
    /// Split a dataset over machines.
    Partition,
    /// Decentralized fit.
    Fit,
    /// Single-machine fit of the pooled data.
    FitCentral,
    /// Predictive mean and standard deviation at new sites.
    Predict,
    /// Confidence intervals for a fitted model.
    Ci,
    /// Grid search over the smoothness ν.
    EstimateNu,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        machines: cli.machines,
        topology: cli.topology.clone(),
        rounds: cli.k,
        iterations: cli.t,
        out_dir: cli.out_dir.clone(),
        workers: cli.workers,
        reference: cli.reference.clone(),
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    spatial_dbcd::par::with_workers(cfg.workers, || match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Partition => commands::partition_cmd(&cfg),
        Command::Fit => commands::fit(&cfg),
        Command::FitCentral => commands::fit_central(&cfg),
        Command::Predict => commands::predict_cmd(&cfg),
        Command::Ci => commands::ci(&cfg),
        Command::EstimateNu => commands::estimate_nu_cmd(&cfg),
    })
}
