//! `ctcbir`: command-line entry points for the retrieval pipeline.
//!
//! Exit codes: 0 on success, 2 on invalid input or arguments, 1 otherwise.
//! Every flag can also be set through a `LIVERCBIR_<FLAG>` variable, and keys
//! of the `train` and `experiment` config files through
//! `LIVERCBIR_<SECTION>__<KEY>`.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctcbir_core::imaging::ClipWindow;
use ctcbir_core::metrics::MapDatabase;

#[derive(Debug, Parser)]
#[command(name = "ctcbir", version, about = "Content-based retrieval of CT liver slices")]
struct Cli {
    /// Log filter, e.g. `info` or `ctcbir_core=debug`.
    #[arg(long, global = true, env = "LIVERCBIR_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a balanced slice dataset from a directory of volumes.
    BuildDataset(BuildDatasetArgs),
    /// Pretrain an encoder on the train split of a manifest.
    Train(TrainArgs),
    /// Embed slices into a store file.
    Embed(EmbedArgs),
    /// Score checkpoints on a manifest, over one or more mask seeds.
    Eval(EvalArgs),
    /// Saliency map of one slice, exported as PFM, JSON sidecar and PNG overlay.
    Explain(ExplainArgs),
    /// Write a synthetic phantom corpus.
    Phantom(PhantomArgs),
    /// Run the random / dual-clip / single-clip comparison on phantom data.
    Experiment(ExperimentArgs),
    /// Serve the HTTP retrieval API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long, env = "LIVERCBIR_DATA_DIR")]
    pub data_dir: PathBuf,
    #[arg(long, env = "LIVERCBIR_OUT_MANIFEST")]
    pub out_manifest: PathBuf,
    #[arg(long, env = "LIVERCBIR_N_TRAIN_VOLUMES")]
    pub n_train_volumes: usize,
    #[arg(long, env = "LIVERCBIR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LIVERCBIR_N_LIVER", default_value_t = 5)]
    pub n_liver: usize,
    #[arg(long, env = "LIVERCBIR_N_NONLIVER", default_value_t = 5)]
    pub n_nonliver: usize,
    /// A slice is "liver" when its mask has more nonzero pixels than this.
    #[arg(long, env = "LIVERCBIR_LIVER_THRESHOLD", default_value_t = 0)]
    pub liver_threshold: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "LIVERCBIR_MANIFEST")]
    pub manifest: PathBuf,
    /// JSON run config with `model` and `train` sections.
    #[arg(long, env = "LIVERCBIR_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "LIVERCBIR_OUT_DIR")]
    pub out_dir: PathBuf,
    /// Both views from the wide window.
    #[arg(long, env = "LIVERCBIR_BASELINE_SINGLE_CLIP")]
    pub baseline_single_clip: bool,
    /// Random encoder initialization.
    #[arg(long, env = "LIVERCBIR_NO_PRETRAIN", conflicts_with = "pretrained")]
    pub no_pretrain: bool,
    /// Initialize the encoder from this checkpoint.
    #[arg(long, env = "LIVERCBIR_PRETRAINED")]
    pub pretrained: Option<PathBuf>,
    #[arg(long, env = "LIVERCBIR_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "LIVERCBIR_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "LIVERCBIR_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "LIVERCBIR_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, env = "LIVERCBIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Embed the sampled slices of this manifest.
    #[arg(long, env = "LIVERCBIR_MANIFEST", conflicts_with = "data_dir", required_unless_present = "data_dir")]
    pub manifest: Option<PathBuf>,
    /// Embed every slice of every volume in this directory.
    #[arg(long, env = "LIVERCBIR_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// `train`, `test` or `all`.
    #[arg(long, env = "LIVERCBIR_SPLIT", default_value = "all")]
    pub split: String,
    #[arg(long, env = "LIVERCBIR_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Repeat for several training runs.
    #[arg(long, env = "LIVERCBIR_CHECKPOINT", required = true, value_delimiter = ',')]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, env = "LIVERCBIR_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "LIVERCBIR_K", default_value_t = 5)]
    pub k: usize,
    /// Mask seeds; each checkpoint is scored once per seed.
    #[arg(long, env = "LIVERCBIR_SEEDS", value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// `test_loo` or `train`.
    #[arg(long, env = "LIVERCBIR_DATABASE", default_value = "test_loo")]
    pub database: MapDatabase,
    /// Masks per saliency map for relevance rank; 0 skips it.
    #[arg(long, env = "LIVERCBIR_RR_N_MASKS", default_value_t = ctcbir_core::relax::DEFAULT_N_MASKS)]
    pub rr_n_masks: usize,
    /// Score relevance rank on at most this many liver slices.
    #[arg(long, env = "LIVERCBIR_RR_MAX_IMAGES")]
    pub rr_max_images: Option<usize>,
    #[arg(long, env = "LIVERCBIR_REPORT")]
    pub report: PathBuf,
    /// Write one per-query CSV per run into this directory.
    #[arg(long, env = "LIVERCBIR_PER_QUERY_DIR")]
    pub per_query_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, env = "LIVERCBIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// `<volume_id>:<slice index>`.
    #[arg(long, env = "LIVERCBIR_SLICE_ID")]
    pub slice_id: String,
    #[arg(long, env = "LIVERCBIR_DATA_DIR", conflicts_with = "manifest", required_unless_present = "manifest")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "LIVERCBIR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "LIVERCBIR_N_MASKS", default_value_t = ctcbir_core::relax::DEFAULT_N_MASKS)]
    pub n_masks: usize,
    #[arg(long, env = "LIVERCBIR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LIVERCBIR_P", default_value_t = ctcbir_core::relax::DEFAULT_P)]
    pub p: f64,
    /// Mask grid cells per side.
    #[arg(long, env = "LIVERCBIR_GRID", default_value_t = ctcbir_core::relax::DEFAULT_GRID.0)]
    pub grid: usize,
    /// Display window of the overlay background.
    #[arg(long, env = "LIVERCBIR_WINDOW", default_value = "wide")]
    pub window: ClipWindow,
    #[arg(long, env = "LIVERCBIR_ALPHA", default_value_t = 0.5)]
    pub alpha: f64,
    /// Overlay PNG; the PFM and JSON sidecar are written next to it.
    #[arg(long, env = "LIVERCBIR_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, env = "LIVERCBIR_OUT_DIR")]
    pub out_dir: PathBuf,
    #[arg(long, env = "LIVERCBIR_N_VOLUMES")]
    pub n_volumes: usize,
    #[arg(long, env = "LIVERCBIR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LIVERCBIR_SIZE")]
    pub size: Option<usize>,
    #[arg(long, env = "LIVERCBIR_DEPTH")]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment config; defaults are used for missing keys.
    #[arg(long, env = "LIVERCBIR_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "LIVERCBIR_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LIVERCBIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "LIVERCBIR_STORE")]
    pub store: PathBuf,
    #[arg(long, env = "LIVERCBIR_DATA_ROOT")]
    pub data_root: PathBuf,
    #[arg(long, env = "LIVERCBIR_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, env = "LIVERCBIR_N_MASKS", default_value_t = ctcbir_core::relax::DEFAULT_N_MASKS)]
    pub n_masks: usize,
    #[arg(long, env = "LIVERCBIR_MAX_CONCURRENT_EXPLANATIONS", default_value_t = 2)]
    pub max_concurrent_explanations: usize,
    #[arg(long, env = "LIVERCBIR_MASK_SEED", default_value_t = 0)]
    pub mask_seed: u64,
    #[arg(long, env = "LIVERCBIR_AUTH_TOKEN", hide_env_values = true)]
    pub auth_token: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Phantom(a) => commands::phantom(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
