//! `softdist` command-line driver. Every subcommand reads one TOML config,
//! prints one JSON line on stdout and logs to stderr.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::commands::Run;
use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "softdist", version, about = "Softmax-distribution defenses against adversarial examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set defense.n_samples=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads for image-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the base CNN.
    TrainCnn,
    /// Attack a pool of images with the configured attack.
    Attack,
    /// Build softmax distributions for classifier training.
    BuildDists,
    /// Train a distribution classifier (mlp, rf or lat).
    TrainDc,
    /// Clean and adversarial accuracy of the vote and trained heads.
    Evaluate,
    /// Distance curves between clean and adversarial distributions.
    Distances,
    /// Vote confusion tables per transform magnitude.
    Confusion,
    /// Accuracy as a function of the number of transformed samples.
    SweepN,
    /// Boundary-attack perturbation size against defended models.
    Boundary,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::TrainCnn => "train-cnn",
            Command::Attack => "attack",
            Command::BuildDists => "build-dists",
            Command::TrainDc => "train-dc",
            Command::Evaluate => "evaluate",
            Command::Distances => "distances",
            Command::Confusion => "confusion",
            Command::SweepN => "sweep-n",
            Command::Boundary => "boundary",
        }
    }
}

fn execute(cli: &Cli) -> Result<Value, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Schema("--config is required".into()))?;
    let cfg = CliConfig::load(path, &cli.overrides)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Schema("--workers must be >= 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let run = Run {
        cfg: &cfg,
        command: cli.command.name(),
        force: cli.force,
    };
    match cli.command {
        Command::TrainCnn => commands::train_cnn_cmd(&run),
        Command::Attack => commands::attack_cmd(&run),
        Command::BuildDists => commands::build_dists_cmd(&run),
        Command::TrainDc => commands::train_dc_cmd(&run),
        Command::Evaluate => commands::evaluate_cmd(&run),
        Command::Distances => commands::distances_cmd(&run),
        Command::Confusion => commands::confusion_cmd(&run),
        Command::SweepN => commands::sweep_cmd(&run),
        Command::Boundary => commands::boundary_cmd(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(mut metrics) => {
            if let Value::Object(m) = &mut metrics {
                m.insert("command".into(), cli.command.name().into());
                m.insert("status".into(), "ok".into());
            }
            println!("{metrics}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("{}", e.json_line());
            ExitCode::from(e.kind().1 as u8)
        }
    }
}
