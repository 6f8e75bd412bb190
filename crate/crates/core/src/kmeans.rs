//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ClusterFeatures;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per row; clusters may end up empty.
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(p: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(points, k, seed, Execution::default())
}

pub fn kmeans_with(points: &Array2<f64>, k: usize, seed: u64, exec: Execution) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::config(format!("k-means needs 1 <= k <= {n} (rows), got {k}")));
    }
    let mut centroids = seed_plus_plus(points, k, seed);
    let assign_all = |centroids: &Array2<f64>| -> Vec<(usize, f64)> {
        par::map_range(exec, n, |i| nearest(points.row(i), centroids))
    };
    let mut assignment: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = assign_all(&centroids).into_iter().map(|(c, _)| c).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        centroids = update(points, &assignment, &centroids);
    }
    let inertia = assign_all(&centroids).iter().map(|(_, d)| d).sum();
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        iterations,
    })
}

/// D² sampling. When every remaining point coincides with a chosen centre
/// the lowest-index point is taken, keeping the draw deterministic.
fn seed_plus_plus(points: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            0
        };
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    let mut c = Array2::zeros((k, points.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).assign(&points.row(i));
    }
    c
}

/// Recompute means. An empty cluster is re-seeded at the point farthest
/// from its current centroid (lowest index on ties).
fn update(points: &Array2<f64>, assignment: &[usize], old: &Array2<f64>) -> Array2<f64> {
    let k = old.nrows();
    let mut sums = Array2::zeros(old.dim());
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &points.row(i);
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        } else {
            let mut far = (0, -1.0);
            for (i, &a) in assignment.iter().enumerate() {
                let d = sq_dist(points.row(i), old.row(a));
                if d > far.1 {
                    far = (i, d);
                }
            }
            sums.row_mut(c).assign(&points.row(far.0));
        }
    }
    sums
}

/// Clustering input built from daily profiles. `Zscore` standardizes each
/// row so that only the shape of the day matters; a flat row becomes zeros.
pub fn profile_features(profiles: &Array2<f64>, features: ClusterFeatures) -> Array2<f64> {
    match features {
        ClusterFeatures::Raw => profiles.clone(),
        ClusterFeatures::Zscore => {
            let mut out = profiles.clone();
            for mut row in out.rows_mut() {
                let n = row.len().max(1) as f64;
                let mean = row.sum() / n;
                let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                row.mapv_inplace(|v| if std > 0.0 { (v - mean) / std } else { 0.0 });
            }
            out
        }
    }
}

/// Adjusted Rand index between two labelings of the same points.
/// 1.0 means identical partitions up to relabeling.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&m| c2(m)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
