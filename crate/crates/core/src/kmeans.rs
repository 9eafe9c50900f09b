//! Lloyd's algorithm with seeded k-means++ initialization.
//!
//! Squared Euclidean distance. Ties in assignment go to the lowest cluster
//! index. An empty cluster takes the point farthest from its current
//! centroid (taken from a cluster that can spare one). Iteration stops when
//! assignments stop changing, when no centroid moves by `1e-6` or more, or
//! after 100 rounds.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::rng_from_seed;

pub const MAX_ITERATIONS: usize = 100;
pub const MOVEMENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Member indices per cluster, each list ascending.
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn assignment(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = c;
            }
        }
        out
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares of a partition, centroids taken as means.
pub fn partition_sse(points: &[&[f64]], clusters: &[Vec<usize>]) -> f64 {
    clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|members| {
            let centroid = mean_of(points, members);
            members.iter().map(|&i| squared_distance(points[i], &centroid)).sum::<f64>()
        })
        .sum()
}

pub fn mean_of(points: &[&[f64]], members: &[usize]) -> Vec<f64> {
    let dim = points[members[0]].len();
    let mut c = vec![0.0; dim];
    for &i in members {
        for (a, v) in c.iter_mut().zip(points[i]) {
            *a += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    c
}

/// k-means++ seeding: first center uniform, later ones proportional to the
/// squared distance to the nearest chosen center. If every remaining point
/// coincides with a center, the lowest unused index is taken.
pub fn kmeans_pp_init(points: &[&[f64]], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = rng_from_seed(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && target < acc {
                    pick = Some(i);
                    break;
                }
            }
            // float round-off can leave `target` just past the last bucket
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, points[next]));
        }
    }
    chosen
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if k > n {
        return Err(invalid(format!("K = {k} exceeds the number of points ({n})")));
    }
    let mut centroids: Vec<Vec<f64>> = kmeans_pp_init(points, k, seed).into_iter().map(|i| points[i].to_vec()).collect();
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest_centroid(p, &centroids)).collect();
        repair_empty(points, &centroids, &mut next, k);
        let changed = next != assignment;
        assignment = next;

        let mut moved: f64 = 0.0;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            let updated = mean_of(points, &members);
            moved = moved.max(squared_distance(centroid, &updated).sqrt());
            *centroid = updated;
        }
        if !changed || moved < MOVEMENT_TOLERANCE {
            break;
        }
    }
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    Ok(KMeansResult { clusters, centroids, iterations })
}

/// Moves, for each empty cluster in index order, the point farthest from its
/// assigned centroid (lowest index on ties) out of a cluster with at least
/// two members.
fn repair_empty(points: &[&[f64]], centroids: &[Vec<f64>], assignment: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &c) in assignment.iter().enumerate() {
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(points[i], &centroids[c]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}
