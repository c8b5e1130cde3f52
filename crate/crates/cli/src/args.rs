use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiertcn::data::IDLE_THRESHOLD_SECS;
use hiertcn::train::SplitMode;

#[derive(Debug, Parser)]
#[command(name = "hiertcn", version, about = "Session-aware sequential recommendation with hierarchical TCNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-session dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out users.
    Eval(EvalArgs),
    /// Rank items for the next interaction of one user history.
    Recommend(RecommendArgs),
    /// Serve recommendations over HTTP.
    Serve(ServeArgs),
    /// Learn item embeddings with the two-layer graph convolution.
    EmbedItems(EmbedArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Cold,
    Warm,
}

impl From<Mode> for SplitMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Cold => SplitMode::Cold,
            Mode::Warm => SplitMode::Warm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pool {
    Impressions,
    Catalog,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic-data config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub dataset: PathBuf,
    /// Run directory for checkpoints, manifest and curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Resume from this `last.ckpt` of an earlier run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub dataset: PathBuf,
    /// Training config used for the split; falls back to the run manifest
    /// next to the checkpoint, then to defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum, default_value = "impressions")]
    pub pool: Pool,
    /// Directory for `report.json` and `report.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub dataset: PathBuf,
    /// Interaction log of a single user (same format as the dataset log).
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Comma-separated candidate IDs; the whole catalog when omitted.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<u64>>,
    /// Current time; a gap past the idle threshold starts a new session.
    #[arg(long)]
    pub now: Option<i64>,
    /// Write the response here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub dataset: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// User-state snapshot; defaults to `users.snap` next to the checkpoint.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long, default_value_t = IDLE_THRESHOLD_SECS)]
    pub idle_threshold: i64,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Graph training config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "HTCN_DATA_DIR")]
    pub dataset: PathBuf,
    /// Output embedding table.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Items a user touches within this many seconds are linked.
    #[arg(long, default_value_t = IDLE_THRESHOLD_SECS)]
    pub window: i64,
}
