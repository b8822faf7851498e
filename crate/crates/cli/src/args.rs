use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slpd::distill::{Activation, PrototypeHead};
use slpd::trainer::{ClusteringSource, InterMode, IntraMode, Sampling};

/// Parses a flag value through the same names the JSON config uses.
fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "slpd",
    version,
    about = "Slide-level prototypical distillation over region embeddings",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Cluster every slide (or all regions) into prototypes.
    Cluster(ClusterArgs),
    /// Slide-to-slide similarity from optimally matched prototypes.
    Similarity(SimilarityArgs),
    /// Top-K most similar slides of every slide.
    Neighbors(NeighborArgs),
    /// Train the teacher-student pair.
    Train(TrainArgs),
    /// Cross-validated KNN evaluation of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads [default: available cores]
    #[arg(long)]
    #[serde(skip)]
    pub workers: Option<usize>,
    /// JSON file with the same fields as the flags; flags given on the command line win [default: none]
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Output directory for the manifest and slide files
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub num_slides: usize,
    #[arg(long, default_value_t = 30)]
    pub regions_per_slide: usize,
    #[arg(long, default_value_t = 32)]
    pub d_in: usize,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    /// Shift of every blob along its class direction
    #[arg(long, default_value_t = 3.0)]
    pub class_separation: f64,
    #[arg(long, default_value_t = 2)]
    pub within_slide_clusters: usize,
    /// Per-coordinate std of the shared background mean
    #[arg(long, default_value_t = slpd::store::BACKGROUND)]
    pub background: f64,
    /// Per-coordinate std of the pattern means around the background
    #[arg(long, default_value_t = slpd::store::PATTERN_SPREAD)]
    pub pattern_spread: f64,
    /// Per-coordinate std of a slide's blob offset from its pattern
    #[arg(long, default_value_t = slpd::store::SLIDE_JITTER)]
    pub slide_jitter: f64,
    /// Per-coordinate std of a region around its blob mean
    #[arg(long, default_value_t = slpd::store::REGION_NOISE)]
    pub region_noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct KMeansArgs {
    /// Prototypes per slide (M)
    #[arg(long, default_value_t = 2)]
    pub num_prototypes: usize,
    #[arg(long, default_value_t = 100)]
    pub kmeans_max_iters: usize,
    #[arg(long, default_value_t = 5)]
    pub kmeans_restarts: usize,
    /// Stop when inertia improves by at most this fraction
    #[arg(long, default_value_t = 1e-6)]
    pub kmeans_rel_tol: f64,
    /// Cluster unit-normalized embeddings [default: off]
    #[arg(long)]
    pub kmeans_normalize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InputArgs {
    /// Dataset manifest
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    /// Embed regions with this checkpoint's teacher encoder [default: raw features]
    #[arg(long)]
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Slide,
    Global,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(skip)]
    pub input: InputArgs,
    /// Output directory
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub kmeans: KMeansArgs,
    /// slide | global
    #[arg(long, default_value = "slide", value_parser = named::<ClusterMode>)]
    pub mode: ClusterMode,
    /// Prototypes of global clustering [default: slides x num_prototypes]
    #[arg(long)]
    pub global_prototypes: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimilarityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(skip)]
    pub input: InputArgs,
    /// Output JSON file
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct NeighborArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(skip)]
    pub input: InputArgs,
    /// Output JSON file
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub kmeans: KMeansArgs,
    /// Neighbors per slide (K)
    #[arg(long, default_value_t = 1)]
    pub num_neighbors: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Dataset manifest
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    /// Output directory for the checkpoint and metrics log
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub kmeans: KMeansArgs,
    /// Neighbor slides per region (K)
    #[arg(long, default_value_t = 1)]
    pub num_neighbors: usize,
    /// Weight of the intra-slide loss
    #[arg(long, default_value_t = 1.0)]
    pub alpha1: f64,
    /// Weight of the inter-slide loss
    #[arg(long, default_value_t = 1.0)]
    pub alpha2: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub lr_momentum: f64,
    /// Cap on the global gradient norm per step; 0 disables
    #[arg(long, default_value_t = 3.0)]
    pub grad_clip: f64,
    /// teacher | student
    #[arg(long, default_value = "teacher", value_parser = named::<ClusteringSource>)]
    pub clustering_source: ClusteringSource,
    /// Head that projects prototypes: teacher | student
    #[arg(long, default_value = "teacher", value_parser = named::<PrototypeHead>)]
    pub prototype_head: PrototypeHead,
    /// prototype | region | off
    #[arg(long, default_value = "prototype", value_parser = named::<InterMode>)]
    pub inter_mode: InterMode,
    /// slide | global | off
    #[arg(long, default_value = "slide", value_parser = named::<IntraMode>)]
    pub intra_mode: IntraMode,
    /// uniform | slide_balanced
    #[arg(long, default_value = "uniform", value_parser = named::<Sampling>)]
    pub sampling: Sampling,
    #[arg(long, default_value_t = 1.0)]
    pub augment_noise_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub augment_dropout_p: f64,
    /// Prototypes of global clustering [default: slides x num_prototypes]
    #[arg(long)]
    pub global_prototypes: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub encoder_hidden1: usize,
    #[arg(long, default_value_t = 64)]
    pub encoder_hidden2: usize,
    /// Embedding width (D)
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub head_hidden: usize,
    /// Head output width (P)
    #[arg(long, default_value_t = 32)]
    pub proj_dim: usize,
    /// gelu | tanh | identity
    #[arg(long, default_value = "gelu", value_parser = named::<Activation>)]
    pub activation: Activation,
    #[arg(long, default_value_t = 0.1)]
    pub tau_student: f64,
    #[arg(long, default_value_t = 0.04)]
    pub tau_teacher: f64,
    #[arg(long, default_value_t = 0.996)]
    pub ema_momentum: f64,
    #[arg(long, default_value_t = 0.9)]
    pub center_momentum: f64,
    /// Write elapsed seconds per epoch into the metrics log [default: off]
    #[arg(long)]
    pub record_wall_time: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Dataset manifest
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    #[serde(skip)]
    pub checkpoint: PathBuf,
    /// Output JSON report
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 5)]
    pub k_eval: usize,
    /// Prototypes per slide for the compactness metric
    #[arg(long, default_value_t = 2)]
    pub num_prototypes: usize,
    /// Also write mean-pooled slide vectors as a dataset in this directory [default: none]
    #[arg(long)]
    #[serde(skip)]
    pub export_pooled: Option<PathBuf>,
}
