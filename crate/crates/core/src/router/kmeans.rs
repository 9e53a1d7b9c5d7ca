use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `[k, D]`
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row of `centroids`; ties go to
/// the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // never land on a zero-weight point through rounding
            if d2[chosen] == 0.0 {
                chosen = d2.iter().enumerate().fold(0, |b, (i, &w)| if w > d2[b] { i } else { b });
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (i, p) in points.chunks(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding. `points` is `[n, D]`.
/// An empty cluster is moved onto the point currently farthest from its
/// centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if points.shape().len() != 2 {
        return Err(Error::Contract(format!("k-means expects [n, D] points, got {:?}", points.shape())));
    }
    let (n, dim) = (points.shape()[0], points.shape()[1]);
    if k == 0 || n < k {
        return Err(Error::Contract(format!("k-means needs 1 ≤ k ≤ n, got k={k}, n={n}")));
    }
    let data = points.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(data, n, dim, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in data.chunks(dim).enumerate() {
            let (j, d) = nearest(p, &centroids, dim);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // repair empty clusters before measuring the objective
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .fold(None, |b: Option<usize>, i| match b {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("some cluster holds two points when one is empty");
                counts[assignments[far]] -= 1;
                counts[j] = 1;
                assignments[far] = j;
                dists[far] = 0.0;
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
                changed = true;
            }
        }
        objective.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        for (i, p) in data.chunks(dim).enumerate() {
            let a = assignments[i];
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            for d in 0..dim {
                centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
            }
        }
    }
    Ok(KMeans {
        centroids: Tensor::new(&[k, dim], centroids)?,
        assignments,
        objective,
        iterations,
    })
}

/// Within-cluster sum of squares of `points` against `centroids`.
pub fn inertia(points: &Tensor, centroids: &Tensor) -> f64 {
    let dim = centroids.shape()[1];
    points.data().chunks(dim).map(|p| nearest(p, centroids.data(), dim).1).sum()
}
