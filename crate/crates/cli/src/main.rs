mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hierflow::graph::PredictionLayerMode;
use hierflow::series::CsvLayout;
use hierflow::train::TaskMode;

#[derive(Parser, Debug)]
#[command(
    name = "hierflow",
    version,
    about = "Hierarchical graph forecasting for count time series"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate archetype-based synthetic counts and their true clusters.
    GenSynthetic(GenSyntheticArgs),
    /// Build the three-layer hierarchy and its hierarchy matrix.
    BuildHierarchy(BuildHierarchyArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Forecast every prediction node from one origin.
    Predict(PredictArgs),
    /// Score a checkpoint, optionally next to baselines.
    Evaluate(EvaluateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    Wide,
    Long,
}

impl From<Layout> for CsvLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Wide => CsvLayout::Wide,
            Layout::Long => CsvLayout::Long,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictionLayer {
    Bottom,
    BottomTop,
    All,
}

impl From<PredictionLayer> for PredictionLayerMode {
    fn from(p: PredictionLayer) -> Self {
        match p {
            PredictionLayer::Bottom => PredictionLayerMode::Bottom,
            PredictionLayer::BottomTop => PredictionLayerMode::BottomTop,
            PredictionLayer::All => PredictionLayerMode::All,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Tp,
    Hp,
}

impl From<Mode> for TaskMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tp => TaskMode::Tp,
            Mode::Hp => TaskMode::Hp,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Input series file.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Series CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "wide")]
    pub layout: Layout,
    /// Slot length in minutes.
    #[arg(long, default_value_t = 15)]
    pub granularity: u32,
}

/// Model configuration file plus flag overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON model configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config file, then HIERFLOW_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub slots_per_day: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub coordination_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub coordination_learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    /// JSON generator configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub slots_per_day: Option<usize>,
    /// Noise standard deviation as a fraction of each node's peak.
    #[arg(long, allow_hyphen_values = true)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wide-format series CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth cluster assignment JSON to write.
    #[arg(long)]
    pub assignment_out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildHierarchyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub prediction_layer: PredictionLayer,
    /// Hierarchy JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Hierarchy matrix CSV to write.
    #[arg(long)]
    pub matrix_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Hierarchy JSON from build-hierarchy.
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Replace the hierarchy's prediction layer.
    #[arg(long, value_enum)]
    pub prediction_layer: Option<PredictionLayer>,
    #[arg(long, value_enum, default_value = "tp")]
    pub mode: Mode,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the training state in the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First forecast slot; needs at least `lookback` slots before it.
    #[arg(long)]
    pub t_origin: usize,
    /// Forecast CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated subset of ha,gru,bu,mo,td.
    #[arg(long, default_value = "")]
    pub baselines: String,
    #[arg(long, value_enum, default_value = "test")]
    pub split: EvalSplit,
    /// Directory for metrics.json, per_node.csv and hierarchical_error.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Also score a predictor that returns the true values.
    #[arg(long, hide = true)]
    pub debug_oracle: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<hierflow::Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
