//! k-means++ seeding followed by Lloyd iterations.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sq_dist, Scalar};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering<T> {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
}

impl<T> Clustering<T> {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn kmeans<T: Scalar>(points: &[Vec<T>], m: usize, seed: u64) -> Result<Clustering<T>> {
    if m < 1 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if m > points.len() {
        return Err(Error::invalid(format!(
            "cluster count {m} exceeds {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0]).as_f64()).collect();
    while centroids.len() < m {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // every point coincides with a centroid already
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]).as_f64());
        }
    }

    let nearest = |p: &[T], cs: &[Vec<T>]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, cent) in cs.iter().enumerate() {
            let d = sq_dist(p, cent).as_f64();
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };
    let mut assignment: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let step: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let next: Vec<usize> = step.iter().map(|s| s.0).collect();
        sse_history.push(step.iter().map(|s| s.1).sum());
        if next == assignment {
            break;
        }
        assignment = next;
        let dim = points[0].len();
        let mut sums = vec![vec![T::zero(); dim]; m];
        let mut counts = vec![0usize; m];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..m {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                let n = T::from_usize_lossy(counts[c]);
                centroids[c] = sums[c].iter().map(|&s| s / n).collect();
            }
        }
    }
    Ok(Clustering {
        assignment,
        centroids,
        sse_history,
    })
}
