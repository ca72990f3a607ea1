//! Mini-batch k-means over feature rows, elbow scanning, and
//! nearest-neighbor queries.
//!
//! Centroids are seeded with k-means++ and refined with streaming
//! mini-batch updates at a per-centroid learning rate of 1/count.
//! Assignment ties always go to the lowest centroid index, and every
//! random draw comes from the caller's seed, so fits are deterministic.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k={k} exceeds the number of points n={n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("invalid clustering input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Row-major points: `data.len() == n * d`.
#[derive(Debug, Clone)]
pub struct Points<'a> {
    pub data: &'a [f32],
    pub n: usize,
    pub d: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f32], n: usize, d: usize) -> Result<Self> {
        if d == 0 || data.len() != n * d {
            return Err(ClusterError::Input(format!(
                "data length {} does not match n={n} x d={d}",
                data.len()
            )));
        }
        Ok(Points { data, n, d })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    /// Row-major k x d centroid matrix.
    pub centroids: Vec<f64>,
    /// Final full-pass assignment counts per centroid.
    pub counts: Vec<usize>,
    /// Final full-pass cluster index per point.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances on the final pass.
    pub inertia: f64,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &y)| (f64::from(x) - y).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn assign_one(row: &[f32], centroids: &[f64], k: usize, d: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = sq_dist(row, &centroids[0..d]);
    for c in 1..k {
        let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
        if dist < best_d {
            best = c;
            best_d = dist;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, then proportional to the
/// squared distance to the nearest chosen centroid.
fn kmeans_pp_init(points: &Points, k: usize, rng: &mut RngStream) -> Vec<f64> {
    let d = points.d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.below(points.n);
    centroids.extend(points.row(first).iter().map(|&v| f64::from(v)));
    let mut dists: Vec<f64> = (0..points.n).map(|i| sq_dist(points.row(i), &centroids[0..d])).collect();
    for _ in 1..k {
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            // all points coincide with chosen centroids; any point works
            rng.below(points.n)
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = points.n - 1;
            for (i, &w) in dists.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let start = centroids.len();
        centroids.extend(points.row(next).iter().map(|&v| f64::from(v)));
        let new_c = centroids[start..].to_vec();
        for (i, best) in dists.iter_mut().enumerate() {
            let dist = sq_dist(points.row(i), &new_c);
            if dist < *best {
                *best = dist;
            }
        }
    }
    centroids
}

/// Full-pass assignment of every point, parallel over points.
fn assign_all(points: &Points, centroids: &[f64], k: usize) -> (Vec<usize>, f64) {
    let d = points.d;
    let pairs: Vec<(usize, f64)> =
        (0..points.n).into_par_iter().map(|i| assign_one(points.row(i), centroids, k, d)).collect();
    let inertia = pairs.iter().map(|&(_, dist)| dist).sum();
    (pairs.into_iter().map(|(c, _)| c).collect(), inertia)
}

/// Mini-batch k-means. Each iteration samples `batch` points, assigns them
/// to the nearest centroid, and pulls each centroid toward its assigned
/// points with a streaming 1/count learning rate. Finishes with one full
/// assignment pass to populate counts/assignments/inertia.
pub fn minibatch_kmeans(points: &Points, k: usize, batch: usize, iters: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || k > points.n {
        return Err(ClusterError::TooManyClusters { k, n: points.n });
    }
    if batch == 0 {
        return Err(ClusterError::Input("batch must be >= 1".into()));
    }
    let d = points.d;
    let mut rng = RngStream::from_parts(&[seed, 0x4b4d45414e53]);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut counts = vec![0u64; k];
    let batch = batch.min(points.n);
    for _ in 0..iters {
        let sample = rng.sample_without_replacement(points.n, batch);
        // assignment against a snapshot keeps the step order-independent
        let assigned: Vec<usize> =
            sample.iter().map(|&i| assign_one(points.row(i), &centroids, k, d).0).collect();
        for (&i, &c) in sample.iter().zip(&assigned) {
            counts[c] += 1;
            let lr = 1.0 / counts[c] as f64;
            let row = points.row(i);
            for j in 0..d {
                let cj = &mut centroids[c * d + j];
                *cj += lr * (f64::from(row[j]) - *cj);
            }
        }
    }
    let (assignments, inertia) = assign_all(points, &centroids, k);
    let mut final_counts = vec![0usize; k];
    for &a in &assignments {
        final_counts[a] += 1;
    }
    Ok(ClusterModel { k, d, centroids, counts: final_counts, assignments, inertia })
}

/// 1 - within-cluster SS / total SS about the global mean. Defined as 1
/// when every point is identical (zero total SS).
pub fn explained_variance(points: &Points, model: &ClusterModel) -> Result<f64> {
    if model.d != points.d || model.assignments.len() != points.n {
        return Err(ClusterError::Input("model was not fitted on these points".into()));
    }
    let d = points.d;
    let mut mean = vec![0.0f64; d];
    for i in 0..points.n {
        for (m, &v) in mean.iter_mut().zip(points.row(i)) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= points.n as f64;
    }
    let total_ss: f64 = (0..points.n).map(|i| sq_dist(points.row(i), &mean)).sum();
    if total_ss <= 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - model.inertia / total_ss).clamp(0.0, 1.0))
}

/// One mini-batch fit per requested k, reporting explained variance.
pub fn elbow_scan(points: &Points, ks: &[usize], batch: usize, iters: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ClusterError::Input("ks must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let model = minibatch_kmeans(points, k, batch, iters, seed)?;
        out.push((k, explained_variance(points, &model)?));
    }
    Ok(out)
}

/// The `n` nearest rows to `query` by Euclidean distance, ascending,
/// ties broken by row index.
pub fn nearest_neighbors(query: &[f32], points: &Points, n: usize) -> Result<Vec<(usize, f64)>> {
    if query.len() != points.d {
        return Err(ClusterError::Input(format!(
            "query dimension {} does not match d={}",
            query.len(),
            points.d
        )));
    }
    if n > points.n {
        return Err(ClusterError::Input(format!("n={n} exceeds point count {}", points.n)));
    }
    let q: Vec<f64> = query.iter().map(|&v| f64::from(v)).collect();
    let mut dists: Vec<(usize, f64)> =
        (0..points.n).map(|i| (i, sq_dist(points.row(i), &q).sqrt())).collect();
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    dists.truncate(n);
    Ok(dists)
}
