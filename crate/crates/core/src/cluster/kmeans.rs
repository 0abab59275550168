use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no center moves by more than this (Euclidean distance).
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 300,
            tol: 1e-8,
            restarts: 10,
        }
    }
}

/// Hard partition of the rows of a data matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    /// Cluster id of every row, each `< k`.
    pub assignments: Vec<usize>,
    /// `[k, dim]`
    pub centers: Tensor,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    /// Objective after each assignment step of the winning restart.
    pub objective_trace: Vec<f64>,
}

impl ClusteringResult {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeding, best of `config.restarts`.
pub fn kmeans(data: &Tensor, config: &KMeansConfig) -> Result<ClusteringResult, Error> {
    let n = data.rows();
    let k = config.k;
    if data.rank() != 2 || data.is_empty() {
        return Err(Error::Dataset(alloc::format!(
            "k-means expects a non-empty matrix, got shape {:?}",
            data.shape()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::ClusterCount { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<ClusteringResult> = None;
    for _ in 0..config.restarts.max(1) {
        let run = lloyd(data, config, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init<R: Rng>(data: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = data.rows();
    let dim = data.row_len();
    let mut centers = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.extend_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[next] = true;
        centers.extend_from_slice(data.row(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    Tensor::from_parts(vec![k, dim], centers)
}

fn assign(data: &Tensor, centers: &Tensor, labels: &mut [usize]) -> f64 {
    let k = centers.rows();
    let mut objective = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let row = data.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let d = sq_dist(row, centers.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        *label = best.0;
        objective += best.1;
    }
    objective
}

fn lloyd<R: Rng>(data: &Tensor, config: &KMeansConfig, rng: &mut R) -> ClusteringResult {
    let n = data.rows();
    let dim = data.row_len();
    let k = config.k;
    let mut centers = plus_plus_init(data, k, rng);
    let mut labels = vec![0usize; n];
    let mut trace = Vec::new();
    let mut objective = assign(data, &centers, &mut labels);
    trace.push(objective);
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // an empty cluster takes over the point farthest from its center
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .map(|i| (i, sq_dist(data.row(i), centers.row(labels[i]))))
                .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                    Some((_, bd)) if bd >= d => acc,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
            }
        }
        let mut sums = vec![0.0; k * dim];
        for (i, &l) in labels.iter().enumerate() {
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let cdata = centers.data_mut();
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut moved = 0.0;
            for j in 0..dim {
                let v = sums[c * dim + j] / counts[c] as f64;
                moved += (v - cdata[c * dim + j]) * (v - cdata[c * dim + j]);
                cdata[c * dim + j] = v;
            }
            shift = shift.max(libm::sqrt(moved));
        }
        let next = assign(data, &centers, &mut labels);
        debug_assert!(
            next <= objective * (1.0 + 1e-12) + 1e-12,
            "k-means objective increased: {objective} -> {next}"
        );
        objective = next;
        trace.push(objective);
        if shift <= config.tol {
            break;
        }
    }
    ClusteringResult {
        assignments: labels,
        centers,
        objective,
        iterations,
        objective_trace: trace,
    }
}
