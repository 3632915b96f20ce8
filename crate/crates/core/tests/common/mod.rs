//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use egcl::rng;
use egcl::tensor::dot;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

/// Minimum k-means inertia over every partition of `points` into exactly `k`
/// non-empty groups, by restricted-growth-string enumeration.
pub fn optimal_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    fn cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let dim = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
            let n = members.len() as f64;
            for d in 0..dim {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / n;
                total += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
            }
        }
        total
    }
    fn walk(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        let i = labels.len();
        if i == points.len() {
            if used == k {
                *best = best.min(cost(points, labels, k));
            }
            return;
        }
        if k - used > points.len() - i {
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels.push(l);
            walk(points, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    walk(points, k, &mut Vec::new(), 0, &mut best);
    best
}

/// The `i`-th small clustering instance: 6 to 12 points in the plane drawn
/// around up to three random centers, with K in 1..=3.
pub fn kmeans_instance(i: u64) -> (Vec<Vec<f64>>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6d_0000 + i);
    let n = rng.random_range(6..=12);
    let k = rng.random_range(1..=3);
    let blobs: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
    let points = (0..n)
        .map(|_| {
            let (cx, cy) = blobs[rng.random_range(0..3)];
            vec![cx + rng.random_range(-2.0..2.0), cy + rng.random_range(-2.0..2.0)]
        })
        .collect();
    (points, k)
}

/// `n` Gaussian directions in `d` dimensions, normalized.
pub fn unit_vectors(seed: u64, stream: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, stream);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Index of the largest dot product with `q`, first on ties.
pub fn brute_force(vecs: &[Vec<f64>], q: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in vecs.iter().enumerate() {
        if dot(q, v) > dot(q, &vecs[best]) {
            best = i;
        }
    }
    best as u32
}
