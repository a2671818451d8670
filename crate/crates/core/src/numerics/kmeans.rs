//! Importance-weighted Lloyd k-means with weighted k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    /// k×d
    pub centroids: Matrix,
    /// Σ wᵢ‖xᵢ − c(xᵢ)‖² at the final assignment.
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step, first entry from the seeding.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn weighted_pick<R: Rng>(scores: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        acc += s;
        if s > 0.0 && acc > target {
            return Some(i);
        }
    }
    scores.iter().rposition(|&s| s > 0.0)
}

fn seed_plus_plus(points: &Matrix, weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    let first = weighted_pick(weights, rng).unwrap_or(0);
    chosen.push(first);
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let scores: Vec<f64> = (0..n)
            .map(|i| if chosen.contains(&i) { 0.0 } else { weights[i] * d2[i] })
            .collect();
        // when every remaining score is zero, fall back to the lowest unchosen index
        let next = weighted_pick(&scores, rng)
            .unwrap_or_else(|| (0..n).find(|i| !chosen.contains(i)).expect("k <= n"));
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn inertia(points: &Matrix, weights: &[f64], assignments: &[usize], centroids: &Matrix) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| weights[i] * sq_dist(points.row(i), centroids.row(c)))
        .sum()
}

/// Weighted Lloyd iterations.
///
/// Centroids are importance-weighted means (plain means for clusters whose
/// total weight is zero). An empty cluster takes the point farthest from its
/// current centroid among clusters with more than one member, lowest index on ties.
pub fn weighted_kmeans(
    points: &Matrix,
    weights: &[f32],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterResult> {
    let (n, d) = points.shape();
    if weights.len() != n {
        return Err(Error::shape(
            "weighted_kmeans",
            format!("{n} points, {} weights", weights.len()),
        ));
    }
    if k == 0 || k > n {
        return Err(Error::Param(format!("k = {k} must be in 1..={n}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Param("weights must be finite and non-negative".into()));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::Param("at least one weight must be positive".into()));
    }
    if k == n {
        return Ok(ClusterResult {
            assignments: (0..n).collect(),
            centroids: points.clone(),
            inertia: 0.0,
            history: vec![0.0],
        });
    }
    let w: Vec<f64> = weights.iter().map(|&x| x as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = seed_plus_plus(points, &w, k, &mut rng);
    let mut centroids = Matrix::from_fn(k, d, |c, j| points.get(seeds[c], j));
    let mut assignments: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
    let mut history = vec![inertia(points, &w, &assignments, &centroids)];

    for _ in 0..max_iter {
        // update
        let mut sums = vec![0.0f64; k * d];
        let mut plain = vec![0.0f64; k * d];
        let mut mass = vec![0.0f64; k];
        let mut count = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            mass[c] += w[i];
            count[c] += 1;
            for (j, &x) in points.row(i).iter().enumerate() {
                sums[c * d + j] += w[i] * x as f64;
                plain[c * d + j] += x as f64;
            }
        }
        for c in 0..k {
            if count[c] == 0 {
                continue;
            }
            for j in 0..d {
                let v = if mass[c] > 0.0 {
                    sums[c * d + j] / mass[c]
                } else {
                    plain[c * d + j] / count[c] as f64
                };
                centroids.set(c, j, v as f32);
            }
        }
        // repair empty clusters
        for c in 0..k {
            if count[c] > 0 {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for i in 0..n {
                if count[assignments[i]] < 2 {
                    continue;
                }
                let dist = sq_dist(points.row(i), centroids.row(assignments[i]));
                if best.is_none_or(|(_, bd)| dist > bd) {
                    best = Some((i, dist));
                }
            }
            if let Some((i, _)) = best {
                count[assignments[i]] -= 1;
                assignments[i] = c;
                count[c] = 1;
                let row = points.row(i).to_vec();
                centroids.row_mut(c).copy_from_slice(&row);
            }
        }
        // assign
        let mut next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
        // keep repaired singletons alive
        let mut sizes = vec![0usize; k];
        for &c in &next {
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                if let Some(i) = (0..n).find(|&i| assignments[i] == c) {
                    sizes[next[i]] -= 1;
                    next[i] = c;
                    sizes[c] += 1;
                }
            }
        }
        let changed = next != assignments;
        assignments = next;
        history.push(inertia(points, &w, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    let inertia = *history.last().expect("non-empty history");
    Ok(ClusterResult {
        assignments,
        centroids,
        inertia,
        history,
    })
}
