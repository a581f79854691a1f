//! The `memaae` command line: synthetic data, training, scoring, evaluation,
//! ablations and hyperparameter sweeps.
//!
//! Exit codes are 0 on success, 1 when a run fails, and 2 for usage errors
//! (bad flags, unreadable or invalid inputs, mismatched checkpoints).

mod commands;
mod failure;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "memaae", version, about = "Memory-augmented adversarial autoencoder for time-series anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic train/test pair.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Write per-point anomaly scores for a test series.
    Score(ScoreArgs),
    /// Score a labelled test series and report point-adjusted best F1.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its ablations.
    Ablate(AblateArgs),
    /// Train and evaluate once per value of one configuration key.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Anomaly spec (TOML). Defaults to the bundled benchmark spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory for train.csv, test.csv and synth_run.toml.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Full,
    NoMemory,
    NoPrediction,
    /// Plain adversarial autoencoder.
    NoMemoryNoPrediction,
}

impl Ablation {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Full => (false, false),
            Ablation::NoMemory => (true, false),
            Ablation::NoPrediction => (false, true),
            Ablation::NoMemoryNoPrediction => (true, true),
        }
    }

    pub fn of(no_memory: bool, no_prediction: bool) -> Self {
        match (no_memory, no_prediction) {
            (false, false) => Ablation::Full,
            (true, false) => Ablation::NoMemory,
            (false, true) => Ablation::NoPrediction,
            (true, true) => Ablation::NoMemoryNoPrediction,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMemory => "no_memory",
            Ablation::NoPrediction => "no_prediction",
            Ablation::NoMemoryNoPrediction => "no_memory_no_prediction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Horizon {
    OneStep,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainingInput {
    /// Training CSV with a header row; a label column, if present, is dropped.
    #[arg(long)]
    pub train_csv: PathBuf,
    /// Training configuration (TOML). Omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Name of the label column in the CSV files.
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: TrainingInput,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Overrides the number of epochs; 0 writes the initialization.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the ablation flags of the configuration.
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test_csv: PathBuf,
    /// Output score CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scoring horizon stored in the checkpoint.
    #[arg(long, value_enum)]
    pub horizon: Option<Horizon>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test_csv: PathBuf,
    /// Name of the 0/1 label column in the test CSV.
    #[arg(long, default_value = "label")]
    pub labels: String,
    /// Directory for report.toml and scores.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Expected ablation of the checkpoint; a mismatch is a usage error.
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    #[arg(long, value_enum)]
    pub horizon: Option<Horizon>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: TrainingInput,
    #[arg(long)]
    pub test_csv: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Variants to run.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Ablation::Full, Ablation::NoMemory, Ablation::NoPrediction])]
    pub variants: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: TrainingInput,
    #[arg(long)]
    pub test_csv: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Configuration key to vary. `lambda`, `gamma1` and `gamma2` name the
    /// three loss weights.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure:#}");
            ExitCode::from(failure.code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}
