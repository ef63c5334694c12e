//! Command-line front end: parses the subcommand and common flags, then
//! defers to the library dispatcher, exiting with its status code.

use clap::{Args, Parser, Subcommand};
use spde1d_cli::{execute, CommandKind, Invocation};
use std::path::PathBuf;

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config (the base seed for sweeps).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-pool size for sweeps (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

/// Simulation and verification driver for a conservative quasilinear SPDE
/// with rough spatial noise on the one-dimensional torus.
#[derive(Debug, Parser)]
#[command(name = "spde1d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a noise realization and its mollifications.
    Noise(CommonArgs),
    /// Build the stationary weight, profile, and decay constants.
    Stationary(CommonArgs),
    /// Evaluate energy constants and test the weighted Poincare inequality.
    Energy(CommonArgs),
    /// Run one simulation and write its artifact set.
    Simulate(CommonArgs),
    /// Seed sweep checking energy dissipation and the decay-rate bound.
    Decay(CommonArgs),
    /// Drifted run checking the mean-drift prediction of the recovered u.
    Drift(CommonArgs),
    /// Mollification sweep checking sup-norm Cauchy behavior of the final state.
    Convergence(CommonArgs),
    /// Grid-refinement study of the rough-start initial layer.
    #[command(name = "initial-layer")]
    InitialLayer(CommonArgs),
}

fn main() {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Noise(a) => (CommandKind::Noise, a),
        Command::Stationary(a) => (CommandKind::Stationary, a),
        Command::Energy(a) => (CommandKind::Energy, a),
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::Decay(a) => (CommandKind::Decay, a),
        Command::Drift(a) => (CommandKind::Drift, a),
        Command::Convergence(a) => (CommandKind::Convergence, a),
        Command::InitialLayer(a) => (CommandKind::InitialLayer, a),
    };
    let invocation = Invocation {
        command: kind,
        config_path: args.config,
        out_dir: args.out,
        seed_override: args.seed,
        workers: args.workers,
    };
    std::process::exit(execute(&invocation));
}
