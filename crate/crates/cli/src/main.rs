//! Command-line harness for the split-learning simulator.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod artifacts;
mod config;
mod run;

use artifacts::Provenance;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "splitsim", version, about = "Split-learning privacy/energy simulator")]
struct Cli {
    /// TOML config file; every key is optional and defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root RNG seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config override, e.g. --override training.epochs=5.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure leakage or energy tables.
    Profile {
        #[command(subcommand)]
        what: ProfileCmd,
    },
    /// Pick per-client split points and relax noise until accuracy recovers.
    Optimize,
    /// Run the split training protocol and log per-epoch records.
    Train,
    /// Run attacks against the configured deployment.
    Attack {
        #[command(subcommand)]
        what: AttackCmd,
    },
    /// Summarize training, decisions, and leakage into one table.
    Report,
    /// Re-run the optimizer across roster sizes over a fixed data pool.
    Scaling {
        /// Roster sizes to sweep, e.g. --counts 3,5,8.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Print the effective configuration after file, overrides, and seed.
    PrintConfig,
}

#[derive(Subcommand)]
enum ProfileCmd {
    /// Reconstruction similarity for every split depth and noise level.
    Privacy,
    /// Per-client energy and peak-power tables over split depths.
    Energy,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Recover inputs from noisy cut-layer activations.
    Reconstruct,
    /// Shadow-model membership inference against a centrally trained target.
    Mia,
}

fn main() {
    if let Err(err) = try_main() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn try_main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let prov = Provenance { config_sha256: cfg.sha256()?, seed: cfg.seed };
    match cli.cmd {
        Cmd::Profile { what: ProfileCmd::Privacy } => run::profile_privacy(&cfg, &cli.out, &prov),
        Cmd::Profile { what: ProfileCmd::Energy } => run::profile_energy(&cfg, &cli.out, &prov),
        Cmd::Optimize => run::run_optimize(&cfg, &cli.out, &prov),
        Cmd::Train => run::run_train(&cfg, &cli.out, &prov),
        Cmd::Attack { what: AttackCmd::Reconstruct } => {
            run::attack_reconstruct(&cfg, &cli.out, &prov)
        }
        Cmd::Attack { what: AttackCmd::Mia } => run::attack_mia(&cfg, &cli.out, &prov),
        Cmd::Report => run::run_report(&cfg, &cli.out, &prov),
        Cmd::Scaling { counts } => run::run_scaling(&cfg, &counts, &cli.out, &prov),
        Cmd::PrintConfig => run::print_config(&cfg, &prov),
    }
}
