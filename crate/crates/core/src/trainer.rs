//! The training loop. Before every epoch the region embeddings are
//! recomputed, clustered into prototypes, and slides are matched against
//! each other; the epoch then runs minibatch distillation against those
//! frozen targets.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    global_cluster, slide_level_cluster, ClusteringError, KMeansConfig, PrototypeSet,
};
use crate::distill::{
    clip_grad_norm, ema_update, entropy, gradients, update_center, Activation, BatchItem,
    BatchLosses, DistillConfig, DistillError, DistillState, LossWeights, ModelConfig, Network,
    PrototypeHead, Sgd,
};
use crate::eval::EvalError;
use crate::store::SlideDataset;
use crate::structure::{
    nearest_cross_slide_region, similarity_matrix, top_k_neighbors, Neighbor, RegionHit,
    SlideSimilarityMatrix, StructureError,
};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_AUGMENT: u64 = 2;
pub const STREAM_KMEANS: u64 = 3;

/// Independent generator `stream` of the master seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringSource {
    #[default]
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterMode {
    #[default]
    Prototype,
    Region,
    Off,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraMode {
    #[default]
    Slide,
    Global,
    Off,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every region once per epoch in a fresh random order.
    #[default]
    Uniform,
    /// As many draws as regions; each picks a slide uniformly, then a region.
    SlideBalanced,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite parameters after epoch {epoch}")]
    Diverged { epoch: usize },
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::Diverged { .. })
    }
}

/// Every knob of a run. Field names match the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_prototypes: usize,
    pub num_neighbors: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_momentum: f64,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub clustering_source: ClusteringSource,
    pub prototype_head: PrototypeHead,
    pub inter_mode: InterMode,
    pub intra_mode: IntraMode,
    pub sampling: Sampling,
    pub augment_noise_sigma: f64,
    pub augment_dropout_p: f64,
    /// Prototype count for global clustering; `None` means slides x M.
    pub global_prototypes: Option<usize>,
    pub encoder_hidden1: usize,
    pub encoder_hidden2: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub activation: Activation,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_rel_tol: f64,
    pub kmeans_normalize: bool,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let distill = DistillConfig::default();
        let kmeans = KMeansConfig::default();
        TrainConfig {
            num_prototypes: 2,
            num_neighbors: 1,
            alpha1: 1.0,
            alpha2: 1.0,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            lr_momentum: 0.9,
            grad_clip: 3.0,
            seed: 0,
            clustering_source: ClusteringSource::Teacher,
            prototype_head: PrototypeHead::Teacher,
            inter_mode: InterMode::Prototype,
            intra_mode: IntraMode::Slide,
            sampling: Sampling::Uniform,
            augment_noise_sigma: 1.0,
            augment_dropout_p: 0.1,
            global_prototypes: None,
            encoder_hidden1: model.encoder_hidden[0],
            encoder_hidden2: model.encoder_hidden[1],
            embed_dim: model.embed_dim,
            head_hidden: model.head_hidden,
            proj_dim: model.proj_dim,
            activation: model.activation,
            tau_student: distill.tau_student,
            tau_teacher: distill.tau_teacher,
            ema_momentum: distill.ema_momentum,
            center_momentum: distill.center_momentum,
            kmeans_max_iters: kmeans.max_iters,
            kmeans_restarts: kmeans.restarts,
            kmeans_rel_tol: kmeans.rel_tol,
            kmeans_normalize: kmeans.normalize,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn model(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            encoder_hidden: [self.encoder_hidden1, self.encoder_hidden2],
            embed_dim: self.embed_dim,
            head_hidden: self.head_hidden,
            proj_dim: self.proj_dim,
            activation: self.activation,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            tau_student: self.tau_student,
            tau_teacher: self.tau_teacher,
            ema_momentum: self.ema_momentum,
            center_momentum: self.center_momentum,
            prototype_head: self.prototype_head,
        }
    }

    pub fn kmeans(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            num_prototypes: self.num_prototypes,
            max_iters: self.kmeans_max_iters,
            rel_tol: self.kmeans_rel_tol,
            restarts: self.kmeans_restarts,
            seed,
            normalize: self.kmeans_normalize,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.num_prototypes == 0 {
            return bad("num_prototypes must be >= 1");
        }
        if self.inter_mode == InterMode::Prototype && self.num_neighbors == 0 {
            return bad("num_neighbors must be >= 1 when inter_mode = prototype");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.augment_noise_sigma >= 0.0 && self.augment_noise_sigma.is_finite()) {
            return bad("augment_noise_sigma must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.augment_dropout_p) {
            return bad("augment_dropout_p must lie in [0, 1)");
        }
        if self.global_prototypes == Some(0) {
            return bad("global_prototypes must be >= 1");
        }
        if [
            self.encoder_hidden1,
            self.encoder_hidden2,
            self.embed_dim,
            self.head_hidden,
            self.proj_dim,
        ]
        .contains(&0)
        {
            return bad("layer widths must be >= 1");
        }
        self.weights().validate()?;
        self.distill().validate()?;
        self.kmeans(0).check()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.lr_momentum) {
            return bad("lr_momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Two augmented views: Gaussian noise, then independent per-coordinate
/// dropout to zero.
pub fn augment<R: Rng + ?Sized>(
    x: &[f64],
    sigma: f64,
    dropout_p: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let view = |rng: &mut R| -> Vec<f64> {
        let mut v: Vec<f64> = x
            .iter()
            .map(|xi| xi + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for vi in v.iter_mut() {
            if rng.random_bool(dropout_p) {
                *vi = 0.0;
            }
        }
        v
    };
    let first = view(rng);
    (first, view(rng))
}

/// Distillation structure frozen for one epoch.
#[derive(Debug, Clone)]
pub struct EpochArtifacts {
    /// Region embeddings under the clustering-source network, per slide.
    pub embeddings: Vec<Vec<Vec<f64>>>,
    /// Per dataset slide; `None` for skipped slides or when not needed.
    pub slide_sets: Vec<Option<PrototypeSet>>,
    pub global_set: Option<PrototypeSet>,
    /// Offset of every slide's first region in the pooled region list.
    pub region_offsets: Vec<usize>,
    pub similarity: Option<SlideSimilarityMatrix>,
    /// Dataset index of every similarity-matrix row.
    pub matrix_slides: Vec<usize>,
    /// Per dataset slide; empty for skipped slides.
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Per dataset slide and region, for the region-level inter target.
    pub region_matches: Vec<Vec<RegionHit>>,
    pub skipped: Vec<String>,
    /// Per dataset slide: fewer regions than prototypes.
    pub skip: Vec<bool>,
}

pub fn extract_embeddings(dataset: &SlideDataset, network: &Network) -> Vec<Vec<Vec<f64>>> {
    crate::eval::embed_dataset(dataset, network)
}

pub fn build_epoch_artifacts(
    dataset: &SlideDataset,
    state: &DistillState,
    cfg: &TrainConfig,
    kmeans_seed: u64,
) -> Result<EpochArtifacts, TrainError> {
    let network = match cfg.clustering_source {
        ClusteringSource::Teacher => &state.teacher,
        ClusteringSource::Student => &state.student,
    };
    let n = dataset.slides.len();
    let m = cfg.num_prototypes;
    let embeddings = extract_embeddings(dataset, network);
    let skipped: Vec<String> = dataset
        .slides
        .iter()
        .filter(|s| s.len() < m)
        .map(|s| s.slide_id.clone())
        .collect();
    let kmeans = cfg.kmeans(kmeans_seed);
    let mut region_offsets = Vec::with_capacity(n);
    let mut total = 0;
    for s in &dataset.slides {
        region_offsets.push(total);
        total += s.len();
    }

    let mut slide_sets: Vec<Option<PrototypeSet>> = vec![None; n];
    if cfg.intra_mode == IntraMode::Slide || cfg.inter_mode == InterMode::Prototype {
        let named: Vec<(String, Vec<Vec<f64>>)> = dataset
            .slides
            .iter()
            .zip(&embeddings)
            .map(|(s, e)| (s.slide_id.clone(), e.clone()))
            .collect();
        let clustering = slide_level_cluster(&named, &kmeans)?;
        debug_assert_eq!(clustering.skipped, skipped);
        let mut sets = clustering.sets.into_iter().peekable();
        for (i, s) in dataset.slides.iter().enumerate() {
            slide_sets[i] = sets.next_if(|set| set.slide_id == s.slide_id);
        }
    }

    let global_set = if cfg.intra_mode == IntraMode::Global {
        let pooled: Vec<Vec<f64>> = embeddings.iter().flatten().cloned().collect();
        let count = cfg.global_prototypes.unwrap_or(n * m);
        Some(global_cluster(&pooled, count, &kmeans)?)
    } else {
        None
    };

    let mut similarity = None;
    let mut matrix_slides = Vec::new();
    let mut neighbors = vec![Vec::new(); n];
    if cfg.inter_mode == InterMode::Prototype {
        let mut sets = Vec::new();
        for (i, set) in slide_sets.iter().enumerate() {
            if let Some(set) = set {
                matrix_slides.push(i);
                sets.push(set.clone());
            }
        }
        if sets.is_empty() {
            return Err(StructureError::NeighborCount {
                k: cfg.num_neighbors,
                max: 0,
            }
            .into());
        }
        let matrix = similarity_matrix(&sets)?;
        let per_row = matrix_slides
            .par_iter()
            .map(|&i| top_k_neighbors(&matrix, &dataset.slides[i].slide_id, cfg.num_neighbors))
            .collect::<Result<Vec<_>, _>>()?;
        for (&i, list) in matrix_slides.iter().zip(per_row) {
            neighbors[i] = list;
        }
        similarity = Some(matrix);
    }

    let mut region_matches = vec![Vec::new(); n];
    if cfg.inter_mode == InterMode::Region {
        let named: Vec<(String, Vec<Vec<f64>>)> = dataset
            .slides
            .iter()
            .zip(&embeddings)
            .map(|(s, e)| (s.slide_id.clone(), e.clone()))
            .collect();
        region_matches = (0..n)
            .into_par_iter()
            .map(|i| {
                if dataset.slides[i].len() < m {
                    return Ok(Vec::new());
                }
                embeddings[i]
                    .iter()
                    .map(|z| nearest_cross_slide_region(z, &dataset.slides[i].slide_id, &named))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, StructureError>>()?;
    }

    Ok(EpochArtifacts {
        embeddings,
        slide_sets,
        global_set,
        region_offsets,
        similarity,
        matrix_slides,
        neighbors,
        region_matches,
        skipped,
        skip: dataset.slides.iter().map(|s| s.len() < m).collect(),
    })
}

/// The shuffle and augmentation streams of a run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub kmeans: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            shuffle: rng_stream(seed, STREAM_SHUFFLE),
            augment: rng_stream(seed, STREAM_AUGMENT),
            kmeans: rng_stream(seed, STREAM_KMEANS),
        }
    }
}

/// `(slide, region)` pairs in visiting order for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(
    dataset: &SlideDataset,
    sampling: Sampling,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    match sampling {
        Sampling::Uniform => {
            let mut all: Vec<(usize, usize)> = dataset
                .slides
                .iter()
                .enumerate()
                .flat_map(|(i, s)| (0..s.len()).map(move |l| (i, l)))
                .collect();
            all.shuffle(rng);
            all
        }
        Sampling::SlideBalanced => (0..dataset.num_regions())
            .map(|_| {
                let i = rng.random_range(0..dataset.slides.len());
                (i, rng.random_range(0..dataset.slides[i].len()))
            })
            .collect(),
    }
}

/// Distillation targets of region `l` of slide `n`, as embeddings.
pub fn region_targets<'a>(
    artifacts: &'a EpochArtifacts,
    cfg: &TrainConfig,
    n: usize,
    l: usize,
) -> (Option<&'a [f64]>, Vec<&'a [f64]>) {
    if artifacts.skip[n] {
        return (None, Vec::new());
    }
    let intra = match cfg.intra_mode {
        IntraMode::Slide => artifacts.slide_sets[n].as_ref().map(|set| set.assigned(l)),
        IntraMode::Global => artifacts
            .global_set
            .as_ref()
            .map(|set| set.assigned(artifacts.region_offsets[n] + l)),
        IntraMode::Off => None,
    };
    let inter = match cfg.inter_mode {
        InterMode::Prototype => {
            let own = artifacts.slide_sets[n].as_ref().expect("clustered slide");
            let m = own.assignments[l];
            artifacts.neighbors[n]
                .iter()
                .map(|nb| {
                    let other = artifacts.slide_sets[artifacts.matrix_slides[nb.index]]
                        .as_ref()
                        .expect("matrix rows are clustered");
                    other.prototypes[nb.permutation[m]].as_slice()
                })
                .collect()
        }
        InterMode::Region => {
            let hit = &artifacts.region_matches[n][l];
            vec![artifacts.embeddings[hit.slide_index][hit.region_index].as_slice()]
        }
        InterMode::Off => Vec::new(),
    };
    (intra, inter)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub loss_self: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_total: f64,
}

/// One pass over the data with frozen artifacts. Returns the mean of every
/// loss over the steps and the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    dataset: &SlideDataset,
    features: &[Vec<Vec<f64>>],
    state: &mut DistillState,
    sgd: &mut Sgd,
    artifacts: &EpochArtifacts,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> (EpochLosses, Vec<BatchLosses>) {
    let order = epoch_order(dataset, cfg.sampling, &mut rngs.shuffle);
    let weights = cfg.weights();
    let mut steps = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<BatchItem<'_>> = chunk
            .iter()
            .map(|&(n, l)| {
                let (view1, view2) = augment(
                    &features[n][l],
                    cfg.augment_noise_sigma,
                    cfg.augment_dropout_p,
                    &mut rngs.augment,
                );
                let (intra_target, inter_targets) = region_targets(artifacts, cfg, n, l);
                BatchItem {
                    view1,
                    view2,
                    intra_target,
                    inter_targets,
                }
            })
            .collect();
        let mut out = gradients(state, weights, &batch);
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut out.grads, cfg.grad_clip);
        }
        sgd.step(&mut state.student, &out.grads)
            .expect("optimizer matches the student");
        let m = state.ema_momentum;
        ema_update(state, m);
        update_center(state, &out.teacher_logits);
        steps.push(out.losses);
    }
    let k = steps.len().max(1) as f64;
    let mean = |f: fn(&BatchLosses) -> f64| steps.iter().map(f).sum::<f64>() / k;
    let losses = EpochLosses {
        loss_self: mean(|b| b.components.self_distill),
        loss_intra: mean(|b| b.components.intra),
        loss_inter: mean(|b| b.components.inter),
        loss_total: mean(|b| b.total),
    };
    (losses, steps)
}

/// Embedding-space summary of the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub compactness: f64,
    pub separation: f64,
    /// Entropy of the teacher output averaged over every region.
    pub teacher_entropy: f64,
}

/// Clusters the teacher embeddings with `kmeans_seed` and measures them.
pub fn state_metrics(
    dataset: &SlideDataset,
    features: &[Vec<Vec<f64>>],
    state: &DistillState,
    cfg: &TrainConfig,
    kmeans_seed: u64,
) -> Result<StateMetrics, TrainError> {
    let embeddings: Vec<Vec<Vec<f64>>> = features
        .par_iter()
        .map(|slide| slide.iter().map(|x| state.teacher_embed(x)).collect())
        .collect();
    let summary =
        crate::eval::embedding_compactness(dataset, &embeddings, &cfg.kmeans(kmeans_seed))?;
    let per_slide: Vec<Vec<f64>> = embeddings
        .par_iter()
        .map(|slide| {
            let mut acc = vec![0.0; state.proj_dim()];
            for z in slide {
                acc.iter_mut()
                    .zip(state.project_teacher(z))
                    .for_each(|(a, p)| *a += p);
            }
            acc
        })
        .collect();
    let mut mean = vec![0.0; state.proj_dim()];
    for acc in &per_slide {
        mean.iter_mut().zip(acc).for_each(|(m, a)| *m += a);
    }
    let total = dataset.num_regions() as f64;
    mean.iter_mut().for_each(|m| *m /= total);
    Ok(StateMetrics {
        compactness: summary.compactness,
        separation: summary.separation,
        teacher_entropy: entropy(&mean),
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_self: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_total: f64,
    pub compactness: f64,
    pub separation: f64,
    pub teacher_entropy: f64,
    pub skipped: usize,
    /// Seconds; `null` unless wall-time recording is enabled.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: DistillState,
    /// Metrics of the initial state, before any update.
    pub initial: StateMetrics,
    pub log: Vec<EpochRecord>,
    /// Minibatch losses of every step, in order.
    pub steps: Vec<BatchLosses>,
}

pub fn initial_state(
    dataset: &SlideDataset,
    cfg: &TrainConfig,
) -> Result<DistillState, TrainError> {
    cfg.validate()?;
    let mut rng = rng_stream(cfg.seed, STREAM_INIT);
    Ok(DistillState::new(
        &cfg.model(dataset.d_in),
        &cfg.distill(),
        &mut rng,
    )?)
}

/// Seed used for the compactness metric, shared by every epoch so the
/// values are comparable.
fn metrics_kmeans_seed(cfg: &TrainConfig) -> u64 {
    cfg.seed
}

pub fn train(dataset: &SlideDataset, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with(dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &SlideDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput, TrainError> {
    let mut state = initial_state(dataset, cfg)?;
    let features: Vec<Vec<Vec<f64>>> = dataset.slides.iter().map(|s| s.features_f64()).collect();
    let initial = state_metrics(dataset, &features, &state, cfg, metrics_kmeans_seed(cfg))?;
    let mut sgd = Sgd::new(cfg.lr, cfg.lr_momentum, &state.student)?;
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let kmeans_seed: u64 = rngs.kmeans.random();
        let artifacts = build_epoch_artifacts(dataset, &state, cfg, kmeans_seed)?;
        let (losses, epoch_steps) = run_epoch(
            dataset, &features, &mut state, &mut sgd, &artifacts, cfg, &mut rngs,
        );
        if !state.student.is_finite() || !state.teacher.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        steps.extend(epoch_steps);
        let metrics = state_metrics(dataset, &features, &state, cfg, metrics_kmeans_seed(cfg))?;
        let record = EpochRecord {
            epoch,
            loss_self: losses.loss_self,
            loss_intra: losses.loss_intra,
            loss_inter: losses.loss_inter,
            loss_total: losses.loss_total,
            compactness: metrics.compactness,
            separation: metrics.separation,
            teacher_entropy: metrics.teacher_entropy,
            skipped: artifacts.skipped.len(),
            wall_time: cfg
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutput {
        state,
        initial,
        log,
        steps,
    })
}

/// JSON lines, one record per epoch.
pub fn metrics_log_text(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_metrics_log(log: &[EpochRecord], path: &Path) -> std::io::Result<()> {
    std::fs::write(path, metrics_log_text(log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::batch_loss;
    use crate::store::{generate_synthetic, Slide, SyntheticConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            encoder_hidden1: 8,
            encoder_hidden2: 8,
            embed_dim: 4,
            head_hidden: 8,
            proj_dim: 6,
            kmeans_restarts: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> SlideDataset {
        generate_synthetic(&SyntheticConfig {
            num_slides: 6,
            regions_per_slide: 5,
            d_in: 4,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn augment_cases() {
        let x = vec![1.0, -2.0, 0.5];
        let mut rng = rng_stream(0, 9);
        assert_eq!(augment(&x, 0.0, 0.0, &mut rng), (x.clone(), x.clone()));
        let a = augment(&x, 0.3, 0.2, &mut rng_stream(4, 2));
        let b = augment(&x, 0.3, 0.2, &mut rng_stream(4, 2));
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
        let (v1, v2) = augment(&vec![1.0; 1000], 0.1, 0.999, &mut rng);
        assert!(v1.iter().filter(|v| **v == 0.0).count() > 980);
        assert!(v2.iter().filter(|v| **v == 0.0).count() > 980);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                num_prototypes: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                num_neighbors: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                augment_dropout_p: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                tau_teacher: 0.2,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let no_inter = TrainConfig {
            num_neighbors: 0,
            inter_mode: InterMode::Off,
            ..TrainConfig::default()
        };
        assert!(no_inter.validate().is_ok());
    }

    #[test]
    fn inter_off_has_no_similarity_matrix() {
        let ds = tiny_dataset(1);
        let cfg = TrainConfig {
            inter_mode: InterMode::Off,
            ..tiny_config()
        };
        let state = initial_state(&ds, &cfg).unwrap();
        let art = build_epoch_artifacts(&ds, &state, &cfg, 0).unwrap();
        assert!(art.similarity.is_none());
        assert!(art.neighbors.iter().all(Vec::is_empty));
        assert!(art.slide_sets.iter().all(Option::is_some));
    }

    #[test]
    fn single_slide_cannot_have_neighbors() {
        let mut ds = tiny_dataset(1);
        ds.slides.truncate(1);
        let cfg = tiny_config();
        let state = initial_state(&ds, &cfg).unwrap();
        assert!(matches!(
            build_epoch_artifacts(&ds, &state, &cfg, 0),
            Err(TrainError::Structure(StructureError::NeighborCount {
                k: 1,
                max: 0
            }))
        ));
    }

    #[test]
    fn identical_slides_are_each_others_neighbor() {
        let mut ds = tiny_dataset(2);
        ds.slides.truncate(1);
        let mut twin = ds.slides[0].clone();
        twin.slide_id = "twin".into();
        for r in &mut twin.regions {
            r.slide_id = "twin".into();
        }
        ds.slides.push(twin);
        let cfg = tiny_config();
        let state = initial_state(&ds, &cfg).unwrap();
        let art = build_epoch_artifacts(&ds, &state, &cfg, 0).unwrap();
        assert_eq!(art.neighbors[0][0].slide_id, "twin");
        assert_eq!(art.neighbors[1][0].slide_id, ds.slides[0].slide_id);
        for list in &art.neighbors {
            assert!((list[0].similarity - 1.0).abs() < 1e-12);
            assert_eq!(list[0].permutation, vec![0, 1]);
        }
    }

    #[test]
    fn small_slides_are_skipped_and_only_self_distilled() {
        let mut ds = tiny_dataset(3);
        ds.slides[2] = Slide::from_rows("small", vec![vec![0.5f32; 4]], Some(0));
        let cfg = tiny_config();
        let state = initial_state(&ds, &cfg).unwrap();
        let art = build_epoch_artifacts(&ds, &state, &cfg, 0).unwrap();
        assert_eq!(art.skipped, vec!["small".to_string()]);
        assert!(art.slide_sets[2].is_none());
        assert!(!art.matrix_slides.contains(&2));
        assert!(art
            .neighbors
            .iter()
            .flatten()
            .all(|nb| nb.slide_id != "small"));
        let (intra, inter) = region_targets(&art, &cfg, 2, 0);
        assert!(intra.is_none() && inter.is_empty());
        let (intra, inter) = region_targets(&art, &cfg, 0, 0);
        assert!(intra.is_some() && inter.len() == 1);
    }

    #[test]
    fn global_and_region_modes_produce_targets() {
        let ds = tiny_dataset(4);
        let cfg = TrainConfig {
            intra_mode: IntraMode::Global,
            inter_mode: InterMode::Region,
            ..tiny_config()
        };
        let state = initial_state(&ds, &cfg).unwrap();
        let art = build_epoch_artifacts(&ds, &state, &cfg, 0).unwrap();
        assert_eq!(art.global_set.as_ref().unwrap().len(), 12);
        assert!(art.slide_sets.iter().all(Option::is_none));
        for (n, hits) in art.region_matches.iter().enumerate() {
            assert_eq!(hits.len(), ds.slides[n].len());
            assert!(hits.iter().all(|h| h.slide_index != n));
        }
        let (intra, inter) = region_targets(&art, &cfg, 1, 3);
        let global = art.global_set.as_ref().unwrap();
        assert_eq!(intra.unwrap(), global.assigned(art.region_offsets[1] + 3));
        assert_eq!(inter.len(), 1);
    }

    #[test]
    fn zero_epochs_returns_the_initial_state() {
        let ds = tiny_dataset(5);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let out = train(&ds, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.state, initial_state(&ds, &cfg).unwrap());
    }

    #[test]
    fn zero_learning_rate_leaves_networks_unchanged() {
        let ds = tiny_dataset(6);
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let init = initial_state(&ds, &cfg).unwrap();
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.state.student, init.student);
        assert_eq!(out.state.teacher, init.teacher);
        assert_ne!(out.state.center, init.center);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let ds = tiny_dataset(7);
        let cfg = tiny_config();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(metrics_log_text(&a.log), metrics_log_text(&b.log));
        assert_eq!(a.log.len(), 2);
        let text = metrics_log_text(&a.log);
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.contains("\"wall_time\":null")));
    }

    #[test]
    fn one_batch_losses_match_composed_distill_ops() {
        let ds = SlideDataset {
            slides: vec![
                Slide::from_rows(
                    "a",
                    vec![vec![1.0, 0.0, 0.5, -1.0], vec![0.2, 0.4, -0.3, 0.0]],
                    Some(0),
                ),
                Slide::from_rows(
                    "b",
                    vec![vec![-1.0, 0.3, 0.0, 0.7], vec![0.9, -0.2, 0.1, 0.4]],
                    Some(1),
                ),
            ],
            d_in: 4,
            num_classes: Some(2),
        };
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..tiny_config()
        };
        let mut state = initial_state(&ds, &cfg).unwrap();
        let features: Vec<Vec<Vec<f64>>> = ds.slides.iter().map(|s| s.features_f64()).collect();
        let art = build_epoch_artifacts(&ds, &state, &cfg, 0).unwrap();

        // Replay the stream draws of the epoch by hand.
        let mut replay = TrainRngs::new(cfg.seed);
        let order = epoch_order(&ds, cfg.sampling, &mut replay.shuffle);
        let batch: Vec<BatchItem<'_>> = order
            .iter()
            .map(|&(n, l)| {
                let (view1, view2) = augment(
                    &features[n][l],
                    cfg.augment_noise_sigma,
                    cfg.augment_dropout_p,
                    &mut replay.augment,
                );
                let (intra_target, inter_targets) = region_targets(&art, &cfg, n, l);
                BatchItem {
                    view1,
                    view2,
                    intra_target,
                    inter_targets,
                }
            })
            .collect();
        let expected = batch_loss(&state, cfg.weights(), &batch);

        let mut sgd = Sgd::new(cfg.lr, cfg.lr_momentum, &state.student).unwrap();
        let mut rngs = TrainRngs::new(cfg.seed);
        let (losses, steps) =
            run_epoch(&ds, &features, &mut state, &mut sgd, &art, &cfg, &mut rngs);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0], expected);
        assert_eq!(losses.loss_total, expected.total);
        assert_eq!(losses.loss_self, expected.components.self_distill);
        assert_eq!(losses.loss_intra, expected.components.intra);
        assert_eq!(losses.loss_inter, expected.components.inter);
        assert_eq!(expected.intra_items, 4);
        assert_eq!(expected.inter_items, 4);
    }

    #[test]
    fn teacher_entropy_is_bounded_by_log_p() {
        let ds = tiny_dataset(8);
        let cfg = tiny_config();
        let state = initial_state(&ds, &cfg).unwrap();
        let features: Vec<Vec<Vec<f64>>> = ds.slides.iter().map(|s| s.features_f64()).collect();
        let m = state_metrics(&ds, &features, &state, &cfg, 0).unwrap();
        assert!(m.teacher_entropy > 0.0 && m.teacher_entropy <= (cfg.proj_dim as f64).ln() + 1e-12);
        assert!((0.0..=2.0).contains(&m.compactness));
    }
}
