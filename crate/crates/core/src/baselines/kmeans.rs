use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub dim: usize,
}

/// Fit diagnostics: inertia after each assignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub labels: Vec<usize>,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(mu, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_points(x: &[Vec<f64>]) -> usize {
    let mut rows: Vec<Vec<u64>> = x
        .iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows.dedup();
    rows.len()
}

/// k-means++ seeding: first centroid uniform, then each next one drawn with
/// probability proportional to squared distance from the nearest chosen.
pub fn kmeans_plus_plus(x: &[Vec<f64>], k: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.below(x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = rng.categorical(&d2).unwrap_or_else(|| rng.below(x.len()));
        centroids.push(x[next].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds until the assignment stops
/// changing or `max_iters` is reached. An empty cluster is reseeded at the
/// point farthest from its current centroid.
pub fn kmeans_fit(x: &[Vec<f64>], k: usize, rng: &mut RngState, max_iters: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if x.is_empty() {
        return Err(Error::Input("no points to cluster".into()));
    }
    let distinct = distinct_points(x);
    if k > distinct {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let init = kmeans_plus_plus(x, k, rng);
    kmeans_fit_from(x, init, max_iters)
}

/// Lloyd iterations from caller-supplied centroids.
pub fn kmeans_fit_from(x: &[Vec<f64>], init: Vec<Vec<f64>>, max_iters: usize) -> Result<KMeansFit> {
    let dim = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != dim) || init.iter().any(|c| c.len() != dim) {
        return Err(Error::Dimension("points and centroids must share one dimension".into()));
    }
    let k = init.len();
    let mut centroids = init;
    let mut labels: Vec<usize> = Vec::new();
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    loop {
        let (new_labels, dists): (Vec<usize>, Vec<f64>) =
            x.iter().map(|p| nearest(&centroids, p)).unzip();
        inertia_history.push(dists.iter().sum());
        let converged = new_labels == labels;
        labels = new_labels;
        if converged || iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; x.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Farthest point from its assigned centroid, not already used.
                let far = (0..x.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= number of points");
                taken[far] = true;
                centroids[c] = x[far].clone();
            }
        }
    }
    Ok(KMeansFit {
        model: KMeansModel { centroids, dim },
        labels,
        inertia_history,
        iterations,
    })
}

pub fn kmeans_assign(model: &KMeansModel, x: &[Vec<f64>]) -> Vec<usize> {
    x.iter().map(|p| nearest(&model.centroids, p).0).collect()
}

pub fn inertia(model: &KMeansModel, x: &[Vec<f64>]) -> f64 {
    x.iter().map(|p| nearest(&model.centroids, p).1).sum()
}
