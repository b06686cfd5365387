//! `kat`: command-line front end for knowledge-augmented training.
//!
//! Exit codes: 0 on success, 2 on configuration or input errors, 3 on
//! numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "kat", version, about = "Knowledge-augmented training for data-poor market applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded train/test split and oracle reference sample.
    Simulate(SimulateArgs),
    /// Calibrate a library of classical models against historical data.
    Calibrate(CalibrateArgs),
    /// Synthesize augmentation data.
    Augment(AugmentArgs),
    /// Train a network with Adam, optionally on a hybrid dataset.
    Train(TrainArgs),
    /// Point or quantile metrics of trained networks.
    Evaluate(EvaluateArgs),
    /// Run a scenario matrix from a JSON config.
    Experiment(ExperimentArgs),
    /// Gradient noise, manifold errors, loss landscape or overfit gap.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    UserModel,
    PriceForecast,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    case: Case,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Simulator config JSON; `--case` and `--seed` override its task and seed.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Bfgs,
    Pso,
    KktBnb,
    /// Closed form where the model has one, BFGS otherwise.
    Auto,
}

/// Dataset location. Files written by `kat` carry a JSON sidecar naming the
/// target columns; plain CSV needs `--targets`.
#[derive(Args, Clone)]
struct DataArgs {
    /// Comma-separated target column names for CSV files without sidecar.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// JSON array of model descriptors.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    method: Method,
    #[command(flatten)]
    data_args: DataArgs,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentMode {
    Kat,
    Da1,
    Da2,
}

#[derive(Args)]
struct AugmentArgs {
    /// Calibrated models JSON (required for `--mode kat`).
    #[arg(long)]
    calibrated: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, value_enum, default_value = "kat")]
    mode: AugmentMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    #[arg(long, default_value_t = 0.5)]
    sparse_bias: f64,
    #[command(flatten)]
    data_args: DataArgs,
    /// Output CSV (a JSON sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Network spec JSON.
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Synthetic data merged behind the historical samples.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Initial historical share; defaults to the uniform share of the data.
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    eta_max: f64,
    /// Updates from eta_min to eta_max.
    #[arg(long = "T", default_value_t = 600)]
    horizon: usize,
    /// Draw uniform batches instead of the dynamic schedule.
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = 4000)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// `mse` or `pinball:Q`; defaults to the loss in the network spec.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Z-score features and targets with statistics of the historical data.
    #[arg(long)]
    normalize: bool,
    /// Record gradient noise every N iterations.
    #[arg(long)]
    grad_noise_every: Option<usize>,
    #[command(flatten)]
    data_args: DataArgs,
    /// Binary parameter file.
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Normalization JSON; defaults to `<out>.norm.json` with `--normalize`.
    #[arg(long)]
    norm_out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Network spec JSON.
    #[arg(long)]
    net: PathBuf,
    /// Parameter file(s). Three files (q = 0.25, 0.5, 0.75) select quantile
    /// evaluation.
    #[arg(long, num_args = 1..)]
    params: Vec<PathBuf>,
    /// Normalization JSON written by `train --normalize`.
    #[arg(long)]
    norm: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Test data.
    #[arg(long)]
    data: PathBuf,
    /// Training data for the train loss and overfit gap; without it both
    /// losses are measured on `--data`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// JSON report whose `crps` field is the skill-score reference.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[command(flatten)]
    data_args: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the Adam iteration budget (for quick runs).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Also run the synthetic-noise sensitivity protocol.
    #[arg(long)]
    sensitivity: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseKind {
    GradNoise,
    Manifold,
    Landscape,
    Overfit,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_enum)]
    kind: DiagnoseKind,
    #[command(flatten)]
    model: ModelArgs,
    /// Historical data (grad-noise, landscape) or test data (overfit).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic data (grad-noise, manifold).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Training data (overfit).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Oracle reference sample (landscape).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Simulator config JSON providing the ground truth (manifold).
    #[arg(long)]
    simulator: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Historical share of the grad-noise batch when synthetic data is given.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    resolution: usize,
    #[command(flatten)]
    data_args: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Augment(a) => commands::augment(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Diagnose(a) => commands::diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
