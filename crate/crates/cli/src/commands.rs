use std::path::{Path, PathBuf};

use clap::ArgMatches;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use slpd::clustering::{ClusteringError, KMeansConfig, PrototypeSet, GLOBAL_SLIDE_ID};
use slpd::distill::{read_checkpoint, CheckpointError, DistillError, DistillState};
use slpd::eval::{teacher_slide_vectors, EvalError};
use slpd::store::{StoreError, MANIFEST_FILE};
use slpd::structure::StructureError;
use slpd::trainer::{metrics_log_text, train_with, TrainError};
use slpd::{
    cross_validated_eval, generate_synthetic, global_cluster, load_dataset, similarity_matrix,
    slide_level_cluster, top_k_neighbors, write_dataset, EvalConfig, Slide, SlideDataset,
    SlideSimilarityMatrix, SyntheticConfig, TrainConfig,
};

use crate::args::{
    ClusterArgs, ClusterMode, Common, EvalArgs, InputArgs, NeighborArgs, SimilarityArgs, SynthArgs,
    TrainArgs,
};
use crate::config::resolve;
use crate::Failure;

fn store_err(e: StoreError) -> Failure {
    Failure::data(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> Failure {
    Failure::data(e.to_string())
}

fn clustering_err(e: ClusteringError) -> Failure {
    match e {
        ClusteringError::Config(_) => Failure::usage(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

fn structure_err(e: StructureError) -> Failure {
    match e {
        StructureError::ZeroNorm => Failure::numeric(e.to_string()),
        StructureError::NeighborCount { .. } => Failure::usage(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

fn distill_err(e: DistillError) -> Failure {
    match e {
        DistillError::Config(_) => Failure::usage(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

fn eval_err(e: EvalError) -> Failure {
    match e {
        EvalError::Clustering(c) => clustering_err(c),
        EvalError::KOutOfRange { .. } | EvalError::Folds => Failure::usage(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

fn train_err(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => Failure::usage(e.to_string()),
        TrainError::Diverged { .. } => Failure::numeric(e.to_string()),
        TrainError::Clustering(c) => clustering_err(c),
        TrainError::Structure(s) => structure_err(s),
        TrainError::Distill(d) => distill_err(d),
        TrainError::Eval(v) => eval_err(v),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn set_workers(common: &Common) -> Result<(), Failure> {
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Failure::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot start {n} workers: {e}")))?;
    }
    Ok(())
}

fn manifest_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(MANIFEST_FILE)
    } else {
        input.to_path_buf()
    }
}

fn load(input: &Path) -> Result<SlideDataset, Failure> {
    load_dataset(&manifest_path(input)).map_err(store_err)
}

fn load_state(path: &Path, d_in: usize) -> Result<DistillState, Failure> {
    let state = read_checkpoint(path).map_err(checkpoint_err)?;
    let expected = state.teacher.encoder.in_dim();
    if expected != d_in {
        return Err(Failure::data(format!(
            "{}: checkpoint expects input dimension {expected}, dataset has {d_in}",
            path.display()
        )));
    }
    Ok(state)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

pub fn synth(args: &SynthArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: SyntheticConfig = resolve(args, matches, args.common.config.as_deref())?;
    let dataset = generate_synthetic(&cfg).map_err(|e| match e {
        StoreError::Invalid(_) => Failure::usage(e.to_string()),
        _ => store_err(e),
    })?;
    let manifest = write_dataset(&dataset, &args.out).map_err(store_err)?;
    eprintln!(
        "wrote {} slides, {} regions to {}",
        dataset.slides.len(),
        dataset.num_regions(),
        manifest.display()
    );
    Ok(())
}

/// Settings shared by the clustering-based commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupConfig {
    seed: u64,
    num_prototypes: usize,
    kmeans_max_iters: usize,
    kmeans_restarts: usize,
    kmeans_rel_tol: f64,
    kmeans_normalize: bool,
    #[serde(default)]
    mode: Option<ClusterMode>,
    #[serde(default)]
    global_prototypes: Option<usize>,
    #[serde(default)]
    num_neighbors: Option<usize>,
}

impl GroupConfig {
    fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            num_prototypes: self.num_prototypes,
            max_iters: self.kmeans_max_iters,
            rel_tol: self.kmeans_rel_tol,
            restarts: self.kmeans_restarts,
            seed: self.seed,
            normalize: self.kmeans_normalize,
        }
    }
}

type NamedVectors = Vec<(String, Vec<Vec<f64>>)>;

/// Region vectors per slide: raw features, or teacher embeddings when a
/// checkpoint is given.
fn region_vectors(dataset: &SlideDataset, input: &InputArgs) -> Result<NamedVectors, Failure> {
    let state = match &input.checkpoint {
        Some(path) => Some(load_state(path, dataset.d_in)?),
        None => None,
    };
    Ok(dataset
        .slides
        .par_iter()
        .map(|s| {
            let rows = s.features_f64();
            let rows = match &state {
                Some(st) => rows.iter().map(|x| st.teacher_embed(x)).collect(),
                None => rows,
            };
            (s.slide_id.clone(), rows)
        })
        .collect())
}

fn prototype_slide(set: &PrototypeSet, label: Option<usize>) -> Slide {
    let rows = set
        .prototypes
        .iter()
        .map(|p| p.iter().map(|&v| v as f32).collect())
        .collect();
    Slide::from_rows(set.slide_id.as_str(), rows, label)
}

pub fn cluster(args: &ClusterArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: GroupConfig = resolve(args, matches, args.common.config.as_deref())?;
    let kcfg = cfg.kmeans();
    kcfg.check().map_err(clustering_err)?;
    let dataset = load(&args.input.input)?;
    let slides = region_vectors(&dataset, &args.input)?;
    let dim = slides
        .first()
        .and_then(|(_, r)| r.first())
        .map_or(dataset.d_in, Vec::len);
    let mode = cfg.mode.unwrap_or(ClusterMode::Slide);
    let (sets, skipped, summary) = match mode {
        ClusterMode::Slide => {
            let result = slide_level_cluster(&slides, &kcfg).map_err(clustering_err)?;
            let entries: Vec<_> = result
                .sets
                .iter()
                .map(|s| {
                    json!({
                        "slide_id": s.slide_id,
                        "inertia": s.inertia,
                        "sizes": s.cluster_sizes(),
                        "assignments": s.assignments,
                    })
                })
                .collect();
            let labels: Vec<Option<usize>> = result
                .sets
                .iter()
                .map(|s| {
                    dataset
                        .slides
                        .iter()
                        .find(|d| d.slide_id == s.slide_id)
                        .and_then(|d| d.label)
                })
                .collect();
            let protos: Vec<Slide> = result
                .sets
                .iter()
                .zip(labels)
                .map(|(s, l)| prototype_slide(s, l))
                .collect();
            (protos, result.skipped, entries)
        }
        ClusterMode::Global => {
            let pooled: Vec<Vec<f64>> =
                slides.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
            let count = cfg
                .global_prototypes
                .unwrap_or(slides.len() * cfg.num_prototypes);
            let set = global_cluster(&pooled, count, &kcfg).map_err(clustering_err)?;
            let mut offset = 0;
            let regions: Vec<_> = slides
                .iter()
                .map(|(id, r)| {
                    let a = &set.assignments[offset..offset + r.len()];
                    offset += r.len();
                    json!({ "slide_id": id, "assignments": a })
                })
                .collect();
            let entry = json!({
                "slide_id": GLOBAL_SLIDE_ID,
                "inertia": set.inertia,
                "sizes": set.cluster_sizes(),
                "regions": regions,
            });
            (vec![prototype_slide(&set, None)], Vec::new(), vec![entry])
        }
    };
    let protos = SlideDataset {
        slides: sets,
        d_in: dim,
        num_classes: dataset.num_classes,
    };
    let manifest = write_dataset(&protos, &args.out.join("prototypes")).map_err(store_err)?;
    write_json(
        &args.out.join("clusters.json"),
        &json!({
            "mode": mode,
            "num_prototypes": kcfg.num_prototypes,
            "skipped": skipped,
            "slides": summary,
        }),
    )?;
    if !skipped.is_empty() {
        eprintln!("skipped {} slides with too few regions", skipped.len());
    }
    eprintln!("wrote prototypes to {}", manifest.display());
    Ok(())
}

fn build_matrix(
    input: &InputArgs,
    cfg: &GroupConfig,
) -> Result<(SlideSimilarityMatrix, Vec<String>), Failure> {
    let kcfg = cfg.kmeans();
    kcfg.check().map_err(clustering_err)?;
    let dataset = load(&input.input)?;
    let slides = region_vectors(&dataset, input)?;
    let result = slide_level_cluster(&slides, &kcfg).map_err(clustering_err)?;
    let matrix = similarity_matrix(&result.sets).map_err(structure_err)?;
    Ok((matrix, result.skipped))
}

pub fn similarity(args: &SimilarityArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: GroupConfig = resolve(args, matches, args.common.config.as_deref())?;
    let (matrix, skipped) = build_matrix(&args.input, &cfg)?;
    write_json(
        &args.out,
        &json!({
            "slide_ids": matrix.slide_ids,
            "values": matrix.values,
            "permutations": matrix.permutations,
            "skipped": skipped,
        }),
    )
}

pub fn neighbors(args: &NeighborArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: GroupConfig = resolve(args, matches, args.common.config.as_deref())?;
    let k = cfg.num_neighbors.unwrap_or(1);
    let (matrix, skipped) = build_matrix(&args.input, &cfg)?;
    let mut entries = Vec::with_capacity(matrix.len());
    for id in &matrix.slide_ids {
        let found = top_k_neighbors(&matrix, id, k).map_err(structure_err)?;
        let list: Vec<_> = found
            .iter()
            .map(|n| {
                json!({
                    "slide_id": n.slide_id,
                    "similarity": n.similarity,
                    "permutation": n.permutation,
                })
            })
            .collect();
        entries.push(json!({ "slide_id": id, "neighbors": list }));
    }
    write_json(
        &args.out,
        &json!({
            "num_neighbors": k,
            "skipped": skipped,
            "slides": entries,
        }),
    )
}

pub fn train(args: &TrainArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: TrainConfig = resolve(args, matches, args.common.config.as_deref())?;
    cfg.validate().map_err(train_err)?;
    let dataset = load(&args.input)?;
    let out = train_with(&dataset, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6} (self {:.6} intra {:.6} inter {:.6})  compactness {:.6}  entropy {:.4}",
            r.epoch, r.loss_total, r.loss_self, r.loss_intra, r.loss_inter, r.compactness, r.teacher_entropy
        );
    })
    .map_err(train_err)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    slpd::distill::write_checkpoint(&out.state, &args.out.join("checkpoint.slpc"))
        .map_err(checkpoint_err)?;
    let log_path = args.out.join("metrics.jsonl");
    std::fs::write(&log_path, metrics_log_text(&out.log)).map_err(|e| io_failure(&log_path, e))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    eprintln!(
        "initial compactness {:.6}, final {:.6}",
        out.initial.compactness,
        out.log
            .last()
            .map_or(out.initial.compactness, |r| r.compactness)
    );
    Ok(())
}

pub fn eval(args: &EvalArgs, matches: &ArgMatches) -> Result<(), Failure> {
    set_workers(&args.common)?;
    let cfg: EvalConfig = resolve(args, matches, args.common.config.as_deref())?;
    let dataset = load(&args.input)?;
    let state = load_state(&args.checkpoint, dataset.d_in)?;
    let report = cross_validated_eval(&dataset, &state, &cfg).map_err(eval_err)?;
    write_json(&args.out, &report)?;
    if let Some(dir) = &args.export_pooled {
        let vectors = teacher_slide_vectors(&dataset, &state);
        let slides = dataset
            .slides
            .iter()
            .zip(&vectors)
            .map(|(s, v)| {
                Slide::from_rows(
                    s.slide_id.as_str(),
                    vec![v.iter().map(|&x| x as f32).collect()],
                    s.label,
                )
            })
            .collect();
        let pooled = SlideDataset {
            slides,
            d_in: state.teacher.encoder.out_dim(),
            num_classes: dataset.num_classes,
        };
        write_dataset(&pooled, dir).map_err(store_err)?;
    }
    eprintln!(
        "accuracy {:.4} +- {:.4}  auc {:.4} +- {:.4}",
        report.accuracy, report.accuracy_std, report.auc, report.auc_std
    );
    Ok(())
}
