mod artifacts;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::Failure;

#[derive(Parser, Debug)]
#[command(name = "dtr", version, about = "Preference-based offline RL pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Config file (`key = value` lines, `include NAME|PATH`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset applied before `--config`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding every artifact of one experiment.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `key=value` override, applied last. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out behavior policies into an offline dataset.
    GenData,
    /// Sample segment pairs and label them.
    Annotate,
    /// Train the reward ensemble on the preference labels.
    TrainReward,
    /// Replace dataset rewards with normalized ensemble rewards.
    Relabel,
    /// Train the policy (and critic for `train.algorithm = dtr`).
    TrainPolicy,
    /// Roll out the trained policy in the environment.
    Eval,
    /// Aggregate run directories into summary JSON and plot-ready CSV.
    Report {
        /// Run directories; defaults to `--out`.
        runs: Vec<PathBuf>,
    },
    /// Print the resolved configuration and its stage hashes.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData => pipeline::gen_data(&cli.global),
        Command::Annotate => pipeline::annotate(&cli.global),
        Command::TrainReward => pipeline::train_reward(&cli.global),
        Command::Relabel => pipeline::relabel(&cli.global),
        Command::TrainPolicy => pipeline::train_policy(&cli.global),
        Command::Eval => pipeline::eval(&cli.global),
        Command::Report { runs } => report::report(&cli.global, &runs),
        Command::ShowConfig => pipeline::show_config(&cli.global),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, msg }) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
