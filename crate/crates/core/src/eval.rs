//! Retrieval and clustering metrics: Recall@k, k-means, NMI, and the
//! unique-center count used to inspect how many centers a class really uses.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, rng_for, squared_distance, streams};
use crate::losses::CenterBank;
use crate::{Error, Result};

/// Ranks reported by default.
pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];
pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const DEFAULT_MERGE_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
}

/// Fraction of queries whose `k` most similar other points (inner product,
/// ties by ascending index) contain a point of the same label.
pub fn recall_at_k<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::contract("embeddings and labels differ in length"));
    }
    if n < 2 {
        return Err(Error::contract("recall needs at least two points"));
    }
    if let Some(k) = ks.iter().find(|k| **k == 0 || **k >= n) {
        return Err(Error::contract(format!("recall@{k} needs 1 <= k < N={n}")));
    }
    // For each query, the rank of the best same-label neighbour; every point
    // ranked above it is necessarily of another label.
    let mut first_hit: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut sims = vec![0.0; n];
    for i in 0..n {
        let q = embeddings[i].as_ref();
        for (j, s) in sims.iter_mut().enumerate() {
            *s = dot(q, embeddings[j].as_ref());
        }
        let best = (0..n)
            .filter(|j| *j != i && labels[*j] == labels[i])
            .fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if sims[b] >= sims[j] => Some(b),
                _ => Some(j),
            });
        first_hit.push(best.map(|b| {
            (0..n)
                .filter(|j| *j != i && (sims[*j] > sims[b] || (sims[*j] == sims[b] && *j < b)))
                .count()
        }));
    }
    Ok(ks
        .iter()
        .map(|k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < *k)).count();
            (*k, hits as f64 / n as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub distortion: f64,
    /// Distortion after each assignment step.
    pub history: Vec<f64>,
}

fn kmeans_plus_plus<P: AsRef<[f64]>, R: Rng>(points: &[P], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every point coincides with a chosen centroid.
            (0..n).find(|i| !chosen[*i]).expect("k <= N")
        };
        chosen[next] = true;
        let c = points[next].as_ref().to_vec();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(squared_distance(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops at `max_iters` or when an assignment step changes nothing. A cluster
/// left empty by an assignment is re-seeded at the point farthest from its
/// current centroid.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("k-means needs 1 <= k <= N, got k={k} N={n}")));
    }
    let dim = points[0].as_ref().len();
    let mut rng = rng_for(seed, streams::KMEANS);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut ids = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p.as_ref(), &centroids);
            changed |= ids[i] != c;
            ids[i] = c;
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, c) in points.iter().zip(&ids) {
            counts[*c] += 1;
            for (s, v) in sums[*c].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids[c] = points[far].as_ref().to_vec();
                dists[far] = 0.0;
            }
        }
    }
    let distortion = *history.last().expect("at least one assignment step");
    Ok(KMeansResult {
        assignment: ClusterAssignment { ids, k },
        centroids,
        distortion,
        history,
    })
}

/// Best of `restarts` k-means runs by final distortion (first wins ties).
pub fn kmeans_best_of<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
) -> Result<KMeansResult> {
    let mut seeds = rng_for(seed, streams::KMEANS);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans(points, k, seeds.random(), max_iters)?;
        if best.as_ref().is_none_or(|b| run.distortion < b.distortion) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(Ω; ℂ) / (H(Ω) + H(ℂ))` in nats.
///
/// When both partitions are trivial (zero entropy) the score is 1.
pub fn nmi(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    if assignment.len() != labels.len() {
        return Err(Error::contract(format!(
            "assignment has {} entries, labels {}",
            assignment.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("nmi of empty partitions"));
    }
    let n = labels.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut a_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut b_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (a, b) in assignment.iter().zip(labels) {
        *joint.entry((*a, *b)).or_default() += 1;
        *a_counts.entry(*a).or_default() += 1;
        *b_counts.entry(*b).or_default() += 1;
    }
    let ha = entropy_of_counts(a_counts.values().copied(), n);
    let hb = entropy_of_counts(b_counts.values().copied(), n);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|((a, b), nab)| {
            let nab = *nab as f64;
            nab / n * (n * nab / (a_counts[a] as f64 * b_counts[b] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Number of distinct centers per class after merging every pair closer than
/// `epsilon` (distance `sqrt(2 − 2wᵀw′)`), with transitive closure.
pub fn count_unique_centers(bank: &CenterBank, epsilon: f64) -> Result<Vec<usize>> {
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("merge threshold must be > 0, got {epsilon}")));
    }
    let k = bank.per_class();
    Ok((0..bank.classes())
        .map(|class| {
            let mut parent: Vec<usize> = (0..k).collect();
            fn root(parent: &mut [usize], mut i: usize) -> usize {
                while parent[i] != i {
                    parent[i] = parent[parent[i]];
                    i = parent[i];
                }
                i
            }
            for t in 0..k {
                for s in t + 1..k {
                    let d = (2.0 - 2.0 * dot(bank.center(class, t), bank.center(class, s)))
                        .max(0.0)
                        .sqrt();
                    if d < epsilon {
                        let (a, b) = (root(&mut parent, t), root(&mut parent, s));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
            (0..k).filter(|i| root(&mut parent, *i) == *i).count()
        })
        .collect())
}

/// Recall@`ks` and NMI of a k-means clustering with one cluster per label.
pub fn evaluate<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize], ks: &[usize], seed: u64) -> Result<RetrievalMetrics> {
    let recall_at = recall_at_k(embeddings, labels, ks)?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let clusters = kmeans_best_of(embeddings, distinct.len(), seed, KMEANS_RESTARTS, KMEANS_MAX_ITERS)?;
    let nmi = nmi(&clusters.assignment.ids, labels)?;
    Ok(RetrievalMetrics { recall_at, nmi })
}
