//! Small dense-vector helpers shared by the numeric modules.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity, or `None` when either vector has zero norm.
#[inline]
pub fn cosine_checked(a: &[f64], b: &[f64]) -> Option<f64> {
    let denom = norm(a) * norm(b);
    if denom > 0.0 && denom.is_finite() {
        Some((dot(a, b) / denom).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Coordinate-wise mean of a non-empty set of equal-length vectors.
pub fn mean(points: &[impl AsRef<[f64]>]) -> Vec<f64> {
    let dim = points[0].as_ref().len();
    let mut acc = vec![0.0; dim];
    for p in points {
        for (a, v) in acc.iter_mut().zip(p.as_ref()) {
            *a += v;
        }
    }
    let n = points.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
