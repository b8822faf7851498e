//! Inter-slide structure: set-to-set slide similarity through optimal
//! one-to-one prototype matching, the dense slide similarity matrix, top-K
//! slide retrieval, and the nearest cross-slide region lookup used by the
//! region-level ablation.

use rayon::prelude::*;
use thiserror::Error;

use crate::clustering::PrototypeSet;
use crate::hungarian;
use crate::vector::cosine_checked;

#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("vector dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("prototype sets {left:?} and {right:?} have different cardinalities ({left_m} vs {right_m})")]
    CardinalityMismatch {
        left: String,
        right: String,
        left_m: usize,
        right_m: usize,
    },
    #[error("slides {offending:?} do not have {expected} prototypes")]
    MixedCardinality {
        expected: usize,
        offending: Vec<String>,
    },
    #[error("unknown slide {0:?}")]
    UnknownSlide(String),
    #[error("K = {k} is outside 1..={max}")]
    NeighborCount { k: usize, max: usize },
    #[error("no candidate regions outside slide {0:?}")]
    NoCandidates(String),
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, StructureError> {
    if u.len() != v.len() {
        return Err(StructureError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    cosine_checked(u, v).ok_or(StructureError::ZeroNorm)
}

/// Optimal one-to-one matching between two prototype sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `permutation[m]` is the prototype of the second set matched to
    /// prototype `m` of the first.
    pub permutation: Vec<usize>,
    /// Mean cosine over matched pairs.
    pub similarity: f64,
}

/// Pairwise cosine matrix between two vector sets.
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, StructureError> {
    a.iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).collect())
        .collect()
}

/// Mean of `cos[m][permutation[m]]`, summed in prototype order.
pub fn matched_similarity(cos: &[Vec<f64>], permutation: &[usize]) -> f64 {
    let sum: f64 = permutation
        .iter()
        .enumerate()
        .map(|(m, &j)| cos[m][j])
        .sum();
    sum / permutation.len() as f64
}

/// Matching on raw prototype vectors. Both sides must have equal length.
pub fn match_vectors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MatchResult, StructureError> {
    let cos = cosine_matrix(a, b)?;
    let permutation = hungarian::solve_max(&cos);
    let similarity = matched_similarity(&cos, &permutation);
    Ok(MatchResult {
        permutation,
        similarity,
    })
}

/// Set-to-set similarity of two slides: the best mean cosine over all
/// one-to-one prototype pairings, found with the Hungarian method.
pub fn optimal_match(a: &PrototypeSet, b: &PrototypeSet) -> Result<MatchResult, StructureError> {
    if a.len() != b.len() {
        return Err(StructureError::CardinalityMismatch {
            left: a.slide_id.clone(),
            right: b.slide_id.clone(),
            left_m: a.len(),
            right_m: b.len(),
        });
    }
    match_vectors(&a.prototypes, &b.prototypes)
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Dense N x N slide similarity with the optimal matching of every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSimilarityMatrix {
    pub slide_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// `permutations[i][j]` maps prototypes of slide i onto those of slide j.
    pub permutations: Vec<Vec<Vec<usize>>>,
}

impl SlideSimilarityMatrix {
    pub fn len(&self) -> usize {
        self.slide_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slide_ids.is_empty()
    }

    pub fn index_of(&self, slide_id: &str) -> Option<usize> {
        self.slide_ids.iter().position(|s| s == slide_id)
    }
}

/// Computes every pair once (upper triangle) and mirrors it, storing the
/// inverse permutation for the lower triangle.
pub fn similarity_matrix(sets: &[PrototypeSet]) -> Result<SlideSimilarityMatrix, StructureError> {
    let n = sets.len();
    if let Some(first) = sets.first() {
        let offending: Vec<String> = sets
            .iter()
            .filter(|s| s.len() != first.len())
            .map(|s| s.slide_id.clone())
            .collect();
        if !offending.is_empty() {
            return Err(StructureError::MixedCardinality {
                expected: first.len(),
                offending,
            });
        }
    }
    let m = sets.first().map_or(0, PrototypeSet::len);
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let matches = pairs
        .par_iter()
        .map(|&(i, j)| optimal_match(&sets[i], &sets[j]))
        .collect::<Result<Vec<_>, _>>()?;

    let identity: Vec<usize> = (0..m).collect();
    let mut values = vec![vec![0.0; n]; n];
    let mut permutations = vec![vec![Vec::new(); n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        permutations[i][i] = identity.clone();
    }
    for (&(i, j), result) in pairs.iter().zip(matches) {
        values[i][j] = result.similarity;
        values[j][i] = result.similarity;
        permutations[j][i] = invert_permutation(&result.permutation);
        permutations[i][j] = result.permutation;
    }
    Ok(SlideSimilarityMatrix {
        slide_ids: sets.iter().map(|s| s.slide_id.clone()).collect(),
        values,
        permutations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub slide_id: String,
    /// Row of the neighbor in the similarity matrix.
    pub index: usize,
    pub similarity: f64,
    /// Maps the query slide's prototypes onto the neighbor's.
    pub permutation: Vec<usize>,
}

/// The `k` most similar other slides, ties broken by ascending slide id.
pub fn top_k_neighbors(
    matrix: &SlideSimilarityMatrix,
    slide_id: &str,
    k: usize,
) -> Result<Vec<Neighbor>, StructureError> {
    let q = matrix
        .index_of(slide_id)
        .ok_or_else(|| StructureError::UnknownSlide(slide_id.to_string()))?;
    let max = matrix.len() - 1;
    if k == 0 || k > max {
        return Err(StructureError::NeighborCount { k, max });
    }
    let mut others: Vec<usize> = (0..matrix.len()).filter(|&j| j != q).collect();
    others.sort_by(|&a, &b| {
        matrix.values[q][b]
            .total_cmp(&matrix.values[q][a])
            .then_with(|| matrix.slide_ids[a].cmp(&matrix.slide_ids[b]))
    });
    Ok(others
        .into_iter()
        .take(k)
        .map(|j| Neighbor {
            slide_id: matrix.slide_ids[j].clone(),
            index: j,
            similarity: matrix.values[q][j],
            permutation: matrix.permutations[q][j].clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionHit {
    pub slide_id: String,
    pub slide_index: usize,
    pub region_index: usize,
    pub similarity: f64,
}

/// Region with the highest cosine to `z` among all slides other than
/// `query_slide`. Zero-norm candidates are ignored; ties keep the first hit
/// in slide then region order.
pub fn nearest_cross_slide_region(
    z: &[f64],
    query_slide: &str,
    slides: &[(String, Vec<Vec<f64>>)],
) -> Result<RegionHit, StructureError> {
    let mut best: Option<RegionHit> = None;
    for (slide_index, (id, regions)) in slides.iter().enumerate() {
        if id == query_slide {
            continue;
        }
        for (region_index, r) in regions.iter().enumerate() {
            let similarity = match cosine(z, r) {
                Ok(c) => c,
                Err(StructureError::ZeroNorm) if cosine_checked(z, z).is_some() => continue,
                Err(e) => return Err(e),
            };
            if best.as_ref().is_none_or(|b| similarity > b.similarity) {
                best = Some(RegionHit {
                    slide_id: id.clone(),
                    slide_index,
                    region_index,
                    similarity,
                });
            }
        }
    }
    best.ok_or_else(|| StructureError::NoCandidates(query_slide.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, prototypes: Vec<Vec<f64>>) -> PrototypeSet {
        PrototypeSet {
            slide_id: id.into(),
            assignments: (0..prototypes.len()).collect(),
            prototypes,
            inertia: 0.0,
        }
    }

    #[test]
    fn cosine_closed_forms() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(StructureError::ZeroNorm)
        );
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(StructureError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn self_match_is_identity() {
        let a = set(
            "a",
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.2, 1.0, 0.0],
                vec![0.0, 0.3, 1.0],
            ],
        );
        let r = optimal_match(&a, &a).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert!((r.similarity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_diagonal() {
        let a = set("a", vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = set("b", vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = optimal_match(&a, &b).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert_eq!(r.similarity, 1.0);
    }

    #[test]
    fn cardinality_mismatch() {
        let a = set("a", vec![vec![1.0]]);
        let b = set("b", vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            optimal_match(&a, &b),
            Err(StructureError::CardinalityMismatch { .. })
        ));
        let err = similarity_matrix(&[a, b.clone(), b]).unwrap_err();
        assert_eq!(
            err,
            StructureError::MixedCardinality {
                expected: 1,
                offending: vec!["b".into(), "b".into()]
            }
        );
    }

    #[test]
    fn single_slide_matrix() {
        let m = similarity_matrix(&[set("a", vec![vec![1.0, 2.0]])]).unwrap();
        assert_eq!(m.values, vec![vec![1.0]]);
        assert_eq!(m.permutations[0][0], vec![0]);
    }

    #[test]
    fn orthogonal_slides() {
        let a = set(
            "a",
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        );
        let b = set(
            "b",
            vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
        );
        let m = similarity_matrix(&[a, b]).unwrap();
        assert_eq!(m.values[0][1], 0.0);
        assert_eq!(m.values[1][0], 0.0);
    }

    #[test]
    fn lower_triangle_holds_inverse() {
        let a = set(
            "a",
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        let b = set(
            "b",
            vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
        );
        let m = similarity_matrix(&[a, b]).unwrap();
        assert_eq!(m.permutations[0][1], vec![2, 0, 1]);
        assert_eq!(m.permutations[1][0], vec![1, 2, 0]);
    }

    fn matrix(ids: &[&str], values: Vec<Vec<f64>>) -> SlideSimilarityMatrix {
        let n = ids.len();
        SlideSimilarityMatrix {
            slide_ids: ids.iter().map(|s| s.to_string()).collect(),
            values,
            permutations: vec![vec![vec![0]; n]; n],
        }
    }

    #[test]
    fn neighbors_sorted_with_id_tiebreak() {
        let m = matrix(
            &["d", "c", "b", "a"],
            vec![
                vec![1.0, 0.5, 0.5, 0.9],
                vec![0.5, 1.0, 0.0, 0.0],
                vec![0.5, 0.0, 1.0, 0.0],
                vec![0.9, 0.0, 0.0, 1.0],
            ],
        );
        let ids: Vec<String> = top_k_neighbors(&m, "d", 3)
            .unwrap()
            .into_iter()
            .map(|n| n.slide_id)
            .collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(top_k_neighbors(&m, "d", 1).unwrap()[0].slide_id, "a");
        assert_eq!(
            top_k_neighbors(&m, "d", 0),
            Err(StructureError::NeighborCount { k: 0, max: 3 })
        );
        assert_eq!(
            top_k_neighbors(&m, "d", 4),
            Err(StructureError::NeighborCount { k: 4, max: 3 })
        );
        assert_eq!(
            top_k_neighbors(&m, "x", 1),
            Err(StructureError::UnknownSlide("x".into()))
        );
    }

    #[test]
    fn duplicate_slide_ranks_first() {
        let a = set("a", vec![vec![1.0, 0.2], vec![-0.3, 1.0]]);
        let b = set("b", vec![vec![0.5, -1.0], vec![1.0, 1.0]]);
        let mut dup = a.clone();
        dup.slide_id = "z".into();
        let m = similarity_matrix(&[a, b, dup]).unwrap();
        let n = top_k_neighbors(&m, "a", 1).unwrap();
        assert_eq!(n[0].slide_id, "z");
        assert!((n[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_region_cases() {
        let z = vec![1.0, 0.0, 0.0];
        let slides = vec![
            ("q".to_string(), vec![vec![1.0, 0.0, 0.0]]),
            (
                "o".to_string(),
                vec![vec![0.0, 1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0, 0.0]],
            ),
            (
                "p".to_string(),
                vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]],
            ),
        ];
        let hit = nearest_cross_slide_region(&z, "q", &slides).unwrap();
        assert_eq!((hit.slide_id.as_str(), hit.region_index), ("o", 1));
        assert!((hit.similarity - 0.5).abs() < 1e-12);

        let mut with_copy = slides.clone();
        with_copy.push(("c".to_string(), vec![vec![2.0, 0.0, 0.0]]));
        let hit = nearest_cross_slide_region(&z, "q", &with_copy).unwrap();
        assert_eq!(
            (hit.slide_id.as_str(), hit.region_index, hit.similarity),
            ("c", 0, 1.0)
        );

        assert_eq!(
            nearest_cross_slide_region(&z, "q", &slides[..1]),
            Err(StructureError::NoCandidates("q".into()))
        );
    }
}
