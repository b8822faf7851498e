//! Embedding quality: KNN slide classification over mean-pooled region
//! embeddings, Mann-Whitney AUC, stratified cross-validation, and the
//! compactness / separation summary of an embedding space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{slide_level_cluster, ClusteringError, KMeansConfig, PrototypeSet};
use crate::distill::{DistillState, Network};
use crate::store::SlideDataset;
use crate::vector::cosine_checked;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot pool an empty slide")]
    EmptySlide,
    #[error("k_eval = {k} is outside 1..={available}")]
    KOutOfRange { k: usize, available: usize },
    #[error("AUC needs both classes among the labels")]
    SingleClass,
    #[error("fold {fold} lacks class {class} in its {split} split")]
    ClassAbsent {
        fold: usize,
        class: usize,
        split: &'static str,
    },
    #[error("evaluation needs labelled slides with exactly two classes")]
    NotBinary,
    #[error("folds must be >= 2 and <= the number of slides")]
    Folds,
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
}

/// Coordinate-wise mean of a slide's region embeddings.
pub fn mean_pool(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    if embeddings.is_empty() {
        return Err(EvalError::EmptySlide);
    }
    Ok(crate::vector::mean(embeddings))
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    cosine_checked(a, b).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub label: usize,
    /// Fraction of the k nearest neighbors labelled 1.
    pub score: f64,
}

/// Cosine KNN. Neighbors are ranked by similarity, ties by training index.
/// The majority label wins; vote ties go to the larger summed similarity,
/// then to the lower class index.
pub fn knn_classify(
    train: &[(Vec<f64>, usize)],
    test: &[Vec<f64>],
    k: usize,
) -> Result<Vec<KnnPrediction>, EvalError> {
    if k == 0 || k > train.len() {
        return Err(EvalError::KOutOfRange {
            k,
            available: train.len(),
        });
    }
    let num_classes = train.iter().map(|(_, l)| l + 1).max().unwrap_or(1);
    Ok(test
        .iter()
        .map(|q| {
            let mut ranked: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, (x, _))| (cosine_or_zero(q, x), i))
                .collect();
            let by_rank =
                |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < ranked.len() {
                ranked.select_nth_unstable_by(k - 1, by_rank);
                ranked.truncate(k);
            }
            let mut votes = vec![0usize; num_classes];
            let mut mass = vec![0.0f64; num_classes];
            for &(sim, i) in &ranked {
                let label = train[i].1;
                votes[label] += 1;
                mass[label] += sim;
            }
            let label = (0..num_classes)
                .max_by(|&a, &b| {
                    votes[a]
                        .cmp(&votes[b])
                        .then(mass[a].total_cmp(&mass[b]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            let positives = votes.get(1).copied().unwrap_or(0);
            KnnPrediction {
                label,
                score: positives as f64 / k as f64,
            }
        })
        .collect())
}

/// Area under the ROC curve as the normalized Mann-Whitney U statistic,
/// with ties counted one half. Uses mid-ranks, O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps every mid-rank integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (positives * negatives) as f64)
}

/// Assigns each slide a fold so every class is spread round-robin over the
/// folds after a seeded shuffle within the class.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = labels.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub accuracy: Vec<f64>,
    pub auc: Vec<f64>,
}

/// Stratified k-fold KNN over binary-labelled slide vectors.
pub fn cross_validated_knn(
    vectors: &[Vec<f64>],
    labels: &[usize],
    folds: usize,
    k_eval: usize,
    seed: u64,
) -> Result<FoldScores, EvalError> {
    if labels.iter().any(|&l| l > 1) {
        return Err(EvalError::NotBinary);
    }
    if folds < 2 || folds > vectors.len() {
        return Err(EvalError::Folds);
    }
    let fold_of = stratified_folds(labels, folds, seed);
    let per_fold = (0..folds)
        .into_par_iter()
        .map(|fold| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut test_labels = Vec::new();
            for (i, (v, &l)) in vectors.iter().zip(labels).enumerate() {
                if fold_of[i] == fold {
                    test.push(v.clone());
                    test_labels.push(l);
                } else {
                    train.push((v.clone(), l));
                }
            }
            for class in 0..2 {
                if !train.iter().any(|(_, l)| *l == class) {
                    return Err(EvalError::ClassAbsent {
                        fold,
                        class,
                        split: "training",
                    });
                }
                if !test_labels.contains(&class) {
                    return Err(EvalError::ClassAbsent {
                        fold,
                        class,
                        split: "test",
                    });
                }
            }
            let preds = knn_classify(&train, &test, k_eval)?;
            let correct = preds
                .iter()
                .zip(&test_labels)
                .filter(|(p, &l)| p.label == l)
                .count();
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let positives: Vec<bool> = test_labels.iter().map(|&l| l == 1).collect();
            Ok((
                correct as f64 / test.len() as f64,
                auc(&scores, &positives)?,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (accuracy, auc) = per_fold.into_iter().unzip();
    Ok(FoldScores { accuracy, auc })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    /// Mean over regions of `1 - cos(z, assigned prototype)`.
    pub compactness: f64,
    /// Mean inter-class minus mean intra-class cosine distance between
    /// mean-pooled slide vectors.
    pub separation: f64,
}

/// `sets[n]` is slide n's prototype set, or `None` when it was skipped.
/// Separation is 0 without labels or when a pair category is empty.
pub fn compactness(
    embeddings: &[Vec<Vec<f64>>],
    sets: &[Option<&PrototypeSet>],
    labels: Option<&[usize]>,
) -> Compactness {
    let mut total = 0.0;
    let mut count = 0usize;
    for (regions, set) in embeddings.iter().zip(sets) {
        if let Some(set) = set {
            for (l, z) in regions.iter().enumerate() {
                total += 1.0 - cosine_or_zero(z, set.assigned(l));
                count += 1;
            }
        }
    }
    let compactness = if count == 0 {
        0.0
    } else {
        total / count as f64
    };

    let separation = labels.map_or(0.0, |labels| {
        let pooled: Vec<Vec<f64>> = embeddings.iter().map(|e| crate::vector::mean(e)).collect();
        let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                let d = 1.0 - cosine_or_zero(&pooled[i], &pooled[j]);
                if labels[i] == labels[j] {
                    intra += d;
                    n_intra += 1;
                } else {
                    inter += d;
                    n_inter += 1;
                }
            }
        }
        let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        avg(inter, n_inter) - avg(intra, n_intra)
    });
    Compactness {
        compactness,
        separation,
    }
}

/// Region embeddings of every slide under `network`'s encoder.
pub fn embed_dataset(dataset: &SlideDataset, network: &Network) -> Vec<Vec<Vec<f64>>> {
    dataset
        .slides
        .par_iter()
        .map(|s| s.features_f64().iter().map(|x| network.embed(x)).collect())
        .collect()
}

/// Clusters the given embeddings per slide and summarizes them.
pub fn embedding_compactness(
    dataset: &SlideDataset,
    embeddings: &[Vec<Vec<f64>>],
    kmeans: &KMeansConfig,
) -> Result<Compactness, EvalError> {
    let named: Vec<(String, Vec<Vec<f64>>)> = dataset
        .slides
        .iter()
        .zip(embeddings)
        .map(|(s, e)| (s.slide_id.clone(), e.clone()))
        .collect();
    let clustering = slide_level_cluster(&named, kmeans)?;
    let mut sets = clustering.sets.iter().peekable();
    let aligned: Vec<Option<&PrototypeSet>> = dataset
        .slides
        .iter()
        .map(|s| sets.next_if(|set| set.slide_id == s.slide_id))
        .collect();
    let labels = dataset.labels();
    Ok(compactness(embeddings, &aligned, labels.as_deref()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub k_eval: usize,
    pub seed: u64,
    pub num_prototypes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            k_eval: 5,
            seed: 0,
            num_prototypes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub auc: f64,
    pub auc_std: f64,
    pub fold_accuracy: Vec<f64>,
    pub fold_auc: Vec<f64>,
    pub compactness: f64,
    pub separation: f64,
}

/// Mean-pooled slide vectors under the teacher encoder, in dataset order.
pub fn teacher_slide_vectors(dataset: &SlideDataset, state: &DistillState) -> Vec<Vec<f64>> {
    embed_dataset(dataset, &state.teacher)
        .iter()
        .map(|e| crate::vector::mean(e))
        .collect()
}

/// Stratified cross-validated KNN on teacher embeddings plus the
/// compactness summary.
pub fn cross_validated_eval(
    dataset: &SlideDataset,
    state: &DistillState,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let labels = dataset.labels().ok_or(EvalError::NotBinary)?;
    if dataset.num_classes != Some(2) {
        return Err(EvalError::NotBinary);
    }
    let embeddings = embed_dataset(dataset, &state.teacher);
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| crate::vector::mean(e)).collect();
    let scores = cross_validated_knn(&vectors, &labels, cfg.folds, cfg.k_eval, cfg.seed)?;
    let kmeans = KMeansConfig {
        num_prototypes: cfg.num_prototypes,
        seed: cfg.seed,
        ..KMeansConfig::default()
    };
    let summary = embedding_compactness(dataset, &embeddings, &kmeans)?;
    let (accuracy, accuracy_std) = mean_std(&scores.accuracy);
    let (auc, auc_std) = mean_std(&scores.auc);
    Ok(EvalReport {
        accuracy,
        accuracy_std,
        auc,
        auc_std,
        fold_accuracy: scores.accuracy,
        fold_auc: scores.auc,
        compactness: summary.compactness,
        separation: summary.separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mean_pool_cases() {
        assert_eq!(mean_pool(&[vec![1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(
            mean_pool(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(mean_pool(&[]), Err(EvalError::EmptySlide));
    }

    #[test]
    fn knn_exact_match_and_uniform_labels() {
        let train = vec![
            (vec![1.0, 0.0], 1),
            (vec![0.0, 1.0], 0),
            (vec![1.0, 1.0], 0),
        ];
        let p = knn_classify(&train, &[vec![2.0, 0.0]], 1).unwrap();
        assert_eq!(
            p[0],
            KnnPrediction {
                label: 1,
                score: 1.0
            }
        );
        let same = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 0)];
        let p = knn_classify(&same, &[vec![1.0, 0.2], vec![-1.0, 0.5]], 2).unwrap();
        assert!(p.iter().all(|p| p.label == 0 && p.score == 0.0));
        assert_eq!(
            knn_classify(&same, &[vec![1.0, 0.0]], 3),
            Err(EvalError::KOutOfRange { k: 3, available: 2 })
        );
    }

    #[test]
    fn knn_vote_tie_goes_to_mass() {
        let train = vec![
            (vec![1.0, 0.0], 0),
            (vec![0.0, 1.0], 1),
            (vec![1.0, 0.1], 1),
            (vec![-1.0, 0.0], 0),
        ];
        // Two votes each among k = 4; class 1 is closer in total.
        let p = knn_classify(&train, &[vec![0.6, 0.8]], 4).unwrap();
        assert_eq!(p[0].label, 1);
        assert_eq!(p[0].score, 0.5);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(),
            0.0
        );
        assert_eq!(auc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), Err(EvalError::SingleClass));
    }

    #[test]
    fn auc_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..30)
                .map(|_| (rng.random_range(0..8) as f64) / 4.0)
                .collect();
            let mut labels: Vec<bool> = (0..30).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            assert_eq!(
                auc(&scores, &labels).unwrap(),
                auc(&transformed, &labels).unwrap()
            );
        }
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i % 4 == 0)).collect();
        let folds = stratified_folds(&labels, 5, 1);
        for f in 0..5 {
            let pos = (0..20).filter(|&i| folds[i] == f && labels[i] == 1).count();
            let all = (0..20).filter(|&i| folds[i] == f).count();
            assert_eq!(pos, 1);
            assert_eq!(all, 4);
        }
        assert_eq!(folds, stratified_folds(&labels, 5, 1));
    }

    #[test]
    fn two_fold_hand_example() {
        // a, b in class 0 and c, d in class 1. Every fold holds one slide of
        // each class, so each test pair is scored against the other pair.
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let c = vec![1.0, 0.2];
        let d = vec![0.3, 1.0];
        let vectors = vec![a, b, c, d];
        let labels = vec![0, 0, 1, 1];
        let folds = stratified_folds(&labels, 2, 4);
        let scores = cross_validated_knn(&vectors, &labels, 2, 1, 4).unwrap();
        let pairs_with_a_and_c = folds[0] == folds[2];
        let fold_of_a = folds[0];
        // Hand-worked k = 1 outcomes:
        //   test {a, c} vs train {b, d}: a -> d (wrong), c -> d (right); scores a:1, c:1 -> AUC 0.5
        //   test {b, d} vs train {a, c}: b -> c (wrong), d -> c (right); AUC 0.5
        //   test {a, d} vs train {b, c}: a -> c (wrong), d -> b (wrong); scores a:1, d:0 -> AUC 0
        //   test {b, c} vs train {a, d}: b -> d (wrong), c -> a (wrong); scores b:1, c:0 -> AUC 0
        let (acc, au) = if pairs_with_a_and_c {
            (0.5, 0.5)
        } else {
            (0.0, 0.0)
        };
        assert_eq!(scores.accuracy, vec![acc, acc]);
        assert_eq!(scores.auc, vec![au, au]);
        assert!(fold_of_a < 2);
    }

    #[test]
    fn compactness_cases() {
        let set = PrototypeSet {
            slide_id: "s".into(),
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            assignments: vec![0, 1],
            inertia: 0.0,
        };
        let emb = vec![vec![vec![3.0, 0.0], vec![0.0, 1.0]]];
        let c = compactness(&emb, &[Some(&set)], None);
        assert_eq!(c.compactness, 0.0);
        assert_eq!(c.separation, 0.0);

        let emb = vec![
            vec![vec![1.0, 0.0]],
            vec![vec![2.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![0.0, 5.0]],
        ];
        let c = compactness(&emb, &[None, None, None, None], Some(&[0, 0, 1, 1]));
        assert_eq!(c.separation, 1.0);
    }
}
