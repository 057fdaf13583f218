mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "taml", version, about = "Time-associated meta learning for windowed event prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV from a generator spec.
    Generate {
        /// TOML file with the synthetic cohort parameters.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also report per-window prevalence, e.g. "0,7,19,31,91d".
        #[arg(long)]
        windows: Option<String>,
    },
    /// Meta-train on the training split of the first seed.
    Train(RunArgs),
    /// Fine-tune and evaluate on held-out data.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Meta-trained checkpoint to fine-tune; trains afresh per seed when
        /// omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report only this window, e.g. "0-7d".
        #[arg(long)]
        window: Option<String>,
        /// Add comparison models: the config list when given bare, or a
        /// comma-separated list.
        #[arg(long, num_args = 0..=1, value_delimiter = ',', default_missing_value = "")]
        baselines: Option<Vec<String>>,
    },
    /// Full model, four ablations, and MAML.
    Ablate(RunArgs),
    /// Retrain across values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// support_size, rho, split_fraction, or window_width.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; support sizes default to 5,10,15,20.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

/// Config file plus command-line overrides shared by the run commands.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single seed; replaces the config seed list.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub windows: Option<String>,
    #[arg(long)]
    pub first_order: bool,
    #[arg(long)]
    pub no_tiss_train: bool,
    #[arg(long)]
    pub no_tiss_test: bool,
    #[arg(long)]
    pub no_task_weights: bool,
    /// Leave out the K reference tasks with the lowest mutual information
    /// with the event.
    #[arg(long, value_name = "K")]
    pub drop_low_mi: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            config,
            out,
            windows,
        } => commands::generate(&config, &out, windows.as_deref()),
        Command::Train(run) => commands::train(&run),
        Command::Evaluate {
            run,
            checkpoint,
            window,
            baselines,
        } => commands::evaluate_cmd(&run, checkpoint.as_deref(), window.as_deref(), baselines),
        Command::Ablate(run) => commands::ablate(&run),
        Command::Sweep { run, axis, values } => commands::sweep(&run, &axis, values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
