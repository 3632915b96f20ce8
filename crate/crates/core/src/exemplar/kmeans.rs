//! Lloyd's algorithm from k-means++ seeding.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    /// Inertia after each assignment step, including the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Index and squared distance of the nearest center; ties go to the lower index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<(usize, f64)> {
    if points.len() * centers.len() < 4096 {
        points.iter().map(|p| nearest(p, centers)).collect()
    } else {
        points.par_iter().map(|p| nearest(p, centers)).collect()
    }
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::labeled(seed, "kmeans++");
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        // K <= distinct points keeps at least one positive weight here.
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 {
                pick = Some(i);
                if r < *d {
                    break;
                }
                r -= d;
            }
        }
        let pick = pick.expect("an uncovered point remains");
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Independent k-means++ starts per call; the lowest final inertia wins.
pub const RESTARTS: u64 = 8;

/// Clusters `points` into `k` groups.
///
/// Each start stops when no center moves by `tol` or more (Euclidean), or
/// after `max_iters` update steps. A cluster left empty takes over the point
/// that is farthest from its own center. Of [`RESTARTS`] seeded starts the one
/// with the lowest inertia is returned, the earliest on ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs K >= 1".into()));
    }
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "points have different dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "k-means input".into(),
        });
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds the {distinct} distinct points"
        )));
    }

    let mut best: Option<KMeansResult> = None;
    for start in 0..RESTARTS {
        let run = lloyd(points, k, rng::derive_seed(seed, &format!("start{start}")), max_iters, tol, dim);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64, dim: usize) -> KMeansResult {
    let mut centers = plus_plus_seeds(points, k, seed);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (assignments, inertia) = assign_and_repair(points, &mut centers);
        history.push(inertia);
        if iterations == max_iters {
            return KMeansResult {
                centers,
                assignments,
                inertia,
                inertia_history: history,
                iterations,
            };
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let n = counts[j] as f64;
            let updated: Vec<f64> = sums[j].iter().map(|s| s / n).collect();
            shift = shift.max(squared_distance(&updated, &centers[j]).sqrt());
            centers[j] = updated;
        }
        iterations += 1;
        if shift < tol {
            let (assignments, inertia) = assign_and_repair(points, &mut centers);
            history.push(inertia);
            return KMeansResult {
                centers,
                assignments,
                inertia,
                inertia_history: history,
                iterations,
            };
        }
    }
}

/// Assigns every point to its nearest center. An empty cluster is moved onto
/// the point farthest from its own center, which then joins it.
fn assign_and_repair(points: &[Vec<f64>], centers: &mut [Vec<f64>]) -> (Vec<usize>, f64) {
    let k = centers.len();
    let nearest = assign(points, centers);
    let mut assignments: Vec<usize> = nearest.iter().map(|(j, _)| *j).collect();
    let mut cost: Vec<f64> = nearest.iter().map(|(_, d)| *d).collect();
    loop {
        let mut counts = vec![0usize; k];
        for &j in &assignments {
            counts[j] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else {
            break;
        };
        let far = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
            .expect("K <= N leaves some cluster with two members");
        centers[empty] = points[far].clone();
        assignments[far] = empty;
        cost[far] = 0.0;
    }
    (assignments, cost.iter().sum())
}
