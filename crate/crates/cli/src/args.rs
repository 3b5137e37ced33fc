use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "disagree", version, about = "Model item-level annotation disagreement")]
pub struct Cli {
    /// Flat JSON file of defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with known rating distributions.
    Synth(SynthArgs),
    /// Validate, group and filter annotations; align embeddings.
    Ingest(IngestArgs),
    /// Train one loss kind on one seed.
    Train(TrainArgs),
    /// Train every (loss, seed) cell and aggregate a report.
    Experiment(ExperimentArgs),
    /// Variance-bin and opposition-bin tables of trained checkpoints.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Annotators per item: "5" or an inclusive range "3-7".
    #[arg(long)]
    pub annotators: Option<String>,
    /// Profile weights, e.g. "consensus=0.5,polarized=0.5".
    #[arg(long)]
    pub mixture: Option<String>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    pub noise_temp: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Per-annotation records, `.jsonl` or `.csv`.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Synthetic ground truth to carry along, filtered to the kept items.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub min_annotators: Option<usize>,
    /// Merge items whose text is byte-identical.
    #[arg(long)]
    pub merge_duplicates: bool,
    /// Histogram bins of the summary CSVs.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model and optimization flags shared by `train` and `experiment`.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub lambda_mean: Option<f64>,
    #[arg(long)]
    pub emd_power: Option<u8>,
    /// Train, validation and test shares, e.g. "0.5,0.25,0.25".
    #[arg(long)]
    pub splits: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Hidden layer sizes, e.g. "256,64".
    #[arg(long)]
    pub hidden: Option<String>,
    /// relu or tanh.
    #[arg(long)]
    pub activation: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Name shown in reports; defaults to the data directory name.
    #[arg(long)]
    pub dataset_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory of `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Output directory of `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    /// "all" or a comma-separated list of loss kinds.
    #[arg(long, alias = "loss")]
    pub losses: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// A previous run's experiment.json to replay; flags override it.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tables {
    /// Variance table, plus the opposition table when the head supports it.
    Both,
    Variance,
    /// Opposition table only; an error for scalar and binary heads.
    Opposition,
}

impl Tables {
    pub fn wants_variance(self) -> bool {
        self != Tables::Opposition
    }

    pub fn wants_opposition(self) -> bool {
        self != Tables::Variance
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// A cell directory, or an experiment directory containing `cells/`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory of `ingest` the run was trained on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub var_bins: Option<usize>,
    #[arg(long)]
    pub opp_bins: Option<usize>,
    /// empirical or latent.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_enum, default_value_t = Tables::Both)]
    pub tables: Tables,
    #[arg(long)]
    pub out: PathBuf,
}
