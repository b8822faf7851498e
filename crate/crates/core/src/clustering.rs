//! k-means producing per-slide prototype sets, plus the pooled (global)
//! clustering used by the ablation path.
//!
//! Seeding is k-means++; each restart draws from one ChaCha stream seeded by
//! [`KMeansConfig::seed`]. The returned prototypes are sorted
//! lexicographically so the output is a pure function of the ordered input
//! points and the seed. Permuting the input points changes which points the
//! seeding draws, so the guarantee under permutation is weaker: when every
//! restart converges to the same partition (well separated data) the sorted
//! prototypes agree to rounding error.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{mean, norm, squared_distance};

/// Slide id used for the pooled clustering result.
pub const GLOBAL_SLIDE_ID: &str = "*global*";

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("{points} points cannot form {prototypes} clusters")]
    TooFewPoints { points: usize, prototypes: usize },
    #[error("point {index} is not finite or has the wrong dimension")]
    BadPoint { index: usize },
    #[error("invalid k-means configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub num_prototypes: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Cluster L2-normalized copies of the points instead of the raw points.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            num_prototypes: 2,
            max_iters: 100,
            rel_tol: 1e-6,
            restarts: 5,
            seed: 0,
            normalize: false,
        }
    }
}

impl KMeansConfig {
    pub fn check(&self) -> Result<(), ClusteringError> {
        if self.num_prototypes == 0 {
            return Err(ClusteringError::Config("num_prototypes must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(ClusteringError::Config("max_iters must be >= 1"));
        }
        if self.restarts == 0 {
            return Err(ClusteringError::Config("restarts must be >= 1"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(ClusteringError::Config("rel_tol must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// M centroids for one slide (or the pooled dataset) and the region map.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub slide_id: String,
    pub prototypes: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Prototype assigned to region `region`.
    pub fn assigned(&self, region: usize) -> &[f64] {
        &self.prototypes[self.assignments[region]]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.prototypes.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Full record of a k-means call.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub best: PrototypeSet,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
    /// Per-restart inertia after every Lloyd iteration.
    pub histories: Vec<Vec<f64>>,
}

pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<PrototypeSet, ClusteringError> {
    kmeans_traced(points, cfg).map(|run| run.best)
}

/// Best-of-restarts k-means++ / Lloyd, keeping every restart's trajectory.
pub fn kmeans_traced(
    points: &[Vec<f64>],
    cfg: &KMeansConfig,
) -> Result<KMeansRun, ClusteringError> {
    cfg.check()?;
    let m = cfg.num_prototypes;
    if points.len() < m {
        return Err(ClusteringError::TooFewPoints {
            points: points.len(),
            prototypes: m,
        });
    }
    let dim = points[0].len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != dim || dim == 0 || p.iter().any(|v| !v.is_finite()) {
            return Err(ClusteringError::BadPoint { index });
        }
    }
    let normalized;
    let data: &[Vec<f64>] = if cfg.normalize {
        normalized = points
            .iter()
            .map(|p| {
                let n = norm(p);
                if n > 0.0 {
                    p.iter().map(|v| v / n).collect()
                } else {
                    p.clone()
                }
            })
            .collect::<Vec<Vec<f64>>>();
        &normalized
    } else {
        points
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    let mut restart_inertias = Vec::with_capacity(cfg.restarts);
    let mut histories = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let seeds = plus_plus_seeds(data, m, &mut rng);
        let (centroids, assignments, inertia, history) = lloyd(data, seeds, cfg);
        restart_inertias.push(inertia);
        histories.push(history);
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((centroids, assignments, inertia));
        }
    }
    let (centroids, assignments, _) = best.expect("restarts >= 1");
    let best = canonicalize(String::new(), data, centroids, assignments);
    Ok(KMeansRun {
        best,
        restart_inertias,
        histories,
    })
}

fn plus_plus_seeds(data: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..data.len())];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|p| squared_distance(p, &data[chosen[0]]))
        .collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a seed; take any unused index.
            let free: Vec<usize> = (0..data.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (w, p) in d2.iter_mut().zip(data) {
            *w = w.min(squared_distance(p, &data[next]));
        }
    }
    chosen.into_iter().map(|i| data[i].clone()).collect()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn inertia_of(data: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    data.iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn centroids_of(data: &[Vec<f64>], assignments: &[usize], m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|k| {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(assignments)
                .filter(|(_, &a)| a == k)
                .map(|(p, _)| p)
                .collect();
            mean(&members)
        })
        .collect()
}

/// Moves, for every empty cluster, the point farthest from its centroid
/// (among clusters that can spare one) into that cluster.
fn repair_empty(
    data: &[Vec<f64>],
    centroids: &[Vec<f64>],
    assignments: &mut [usize],
    distances: &mut [f64],
) {
    let m = centroids.len();
    let mut sizes = vec![0usize; m];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for k in 0..m {
        if sizes[k] > 0 {
            continue;
        }
        let mut pick: Option<usize> = None;
        for i in 0..data.len() {
            if sizes[assignments[i]] > 1 && pick.is_none_or(|p| distances[i] > distances[p]) {
                pick = Some(i);
            }
        }
        let i = pick.expect("points >= clusters leaves a donor");
        sizes[assignments[i]] -= 1;
        sizes[k] += 1;
        assignments[i] = k;
        distances[i] = 0.0;
    }
}

fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    data.iter().map(|p| nearest(p, centroids)).unzip()
}

fn lloyd(
    data: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    cfg: &KMeansConfig,
) -> (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>) {
    let m = centroids.len();
    let mut history: Vec<f64> = Vec::new();
    let mut assignments: Vec<usize> = Vec::new();
    for _ in 0..cfg.max_iters {
        let (mut next, mut distances) = assign(data, &centroids);
        repair_empty(data, &centroids, &mut next, &mut distances);
        let unchanged = next == assignments;
        assignments = next;
        centroids = centroids_of(data, &assignments, m);
        let inertia = inertia_of(data, &centroids, &assignments);
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev + 1e-12 * prev.abs(),
                "Lloyd iteration increased inertia: {prev} -> {inertia}"
            );
        }
        let converged = unchanged
            || inertia == 0.0
            || history
                .last()
                .is_some_and(|&prev| prev - inertia <= cfg.rel_tol * prev);
        history.push(inertia);
        if converged {
            break;
        }
    }
    // Stopping on tolerance can leave a point closer to another centroid;
    // take the nearest-centroid map when it keeps every cluster populated.
    let (nearest_map, _) = assign(data, &centroids);
    let mut sizes = vec![0usize; m];
    nearest_map.iter().for_each(|&a| sizes[a] += 1);
    if nearest_map != assignments && sizes.iter().all(|&s| s > 0) {
        assignments = nearest_map;
        let inertia = inertia_of(data, &centroids, &assignments);
        history.push(inertia);
    }
    let inertia = *history.last().expect("max_iters >= 1");
    (centroids, assignments, inertia, history)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn canonicalize(
    slide_id: String,
    data: &[Vec<f64>],
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
) -> PrototypeSet {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| lexicographic(&centroids[a], &centroids[b]).then(a.cmp(&b)));
    let mut rank = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let prototypes: Vec<Vec<f64>> = order.iter().map(|&k| centroids[k].clone()).collect();
    let assignments: Vec<usize> = assignments.iter().map(|&a| rank[a]).collect();
    let inertia = inertia_of(data, &prototypes, &assignments);
    PrototypeSet {
        slide_id,
        prototypes,
        assignments,
        inertia,
    }
}

/// Per-slide clustering result. Slides with fewer regions than prototypes
/// are listed in `skipped` instead of failing the call.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideClustering {
    pub sets: Vec<PrototypeSet>,
    pub skipped: Vec<String>,
}

/// Clusters every slide independently, all with the same seed.
pub fn slide_level_cluster(
    slides: &[(String, Vec<Vec<f64>>)],
    cfg: &KMeansConfig,
) -> Result<SlideClustering, ClusteringError> {
    cfg.check()?;
    let results: Vec<Result<PrototypeSet, ClusteringError>> = slides
        .par_iter()
        .map(|(id, points)| {
            kmeans(points, cfg).map(|mut set| {
                set.slide_id = id.clone();
                set
            })
        })
        .collect();
    let mut out = SlideClustering {
        sets: Vec::new(),
        skipped: Vec::new(),
    };
    for ((id, _), result) in slides.iter().zip(results) {
        match result {
            Ok(set) => out.sets.push(set),
            Err(ClusteringError::TooFewPoints { .. }) => out.skipped.push(id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One k-means over all regions pooled together.
pub fn global_cluster(
    pooled: &[Vec<f64>],
    total_prototypes: usize,
    cfg: &KMeansConfig,
) -> Result<PrototypeSet, ClusteringError> {
    let cfg = KMeansConfig {
        num_prototypes: total_prototypes,
        ..cfg.clone()
    };
    let mut set = kmeans(pooled, &cfg)?;
    set.slide_id = GLOBAL_SLIDE_ID.to_string();
    Ok(set)
}
