//! `splitfed`: data generation, the three training regimes, split planning,
//! reporting and the networked server and client roles.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigArgs;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// Anything that failed while running; exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

/// Runtime failure from any library error.
pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "splitfed", version, about = "Split-federated segmentation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as image and mask PNGs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One model on all clients' pooled data.
    TrainCentralized(ConfigArgs),
    /// One model per client on its own data.
    TrainLocal(ConfigArgs),
    /// SplitFed training with every client in this process.
    TrainSplitfed(ConfigArgs),
    /// Score every split plan and recommend one.
    PlanSplit {
        #[command(flatten)]
        args: ConfigArgs,
        /// Upper bound on the client's share of MACs.
        #[arg(long)]
        max_client_share: Option<f64>,
        /// Upper bound on wire bytes per sample.
        #[arg(long)]
        max_cut_bytes: Option<u64>,
    },
    /// Summarize finished runs into a C/L/S table, optionally with model costs.
    Report {
        /// Run directories holding `history.json`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also tabulate parameters and MACs of every network.
        #[arg(long)]
        costs: bool,
        #[arg(long, default_value_t = 240)]
        cost_input_size: usize,
        #[arg(long, default_value_t = 32)]
        cost_base_width: usize,
    },
    /// Server role over TCP.
    Serve {
        #[command(flatten)]
        args: ConfigArgs,
        /// Clients to wait for; defaults to the partition's client count.
        #[arg(long)]
        clients: Option<usize>,
    },
    /// Client role over TCP.
    Client {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        client_id: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { out, samples, size, classes, seed } => commands::gen_data(&out, samples, size, classes, seed),
        Command::TrainCentralized(args) => commands::train_centralized(&args.load()?),
        Command::TrainLocal(args) => commands::train_local(&args.load()?),
        Command::TrainSplitfed(args) => commands::train_splitfed(&args.load()?),
        Command::PlanSplit { args, max_client_share, max_cut_bytes } => commands::plan_split(&args.load()?, max_client_share, max_cut_bytes),
        Command::Report { runs, out, costs, cost_input_size, cost_base_width } => {
            commands::report(&runs, &out, costs.then_some((cost_input_size, cost_base_width)))
        }
        Command::Serve { args, clients } => commands::serve(&args.load()?, clients),
        Command::Client { args, client_id } => commands::client(&args.load()?, client_id),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
