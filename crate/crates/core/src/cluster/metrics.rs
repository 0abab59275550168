use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;

/// Normalization used by [`nmi`]: `I / sqrt(H(pred) H(truth))`.
pub const NMI_VARIANT: &str = "sqrt";

/// Accuracy, normalized mutual information and purity of a partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricTriple {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
}

impl MetricTriple {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self, Error> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            nmi: nmi(pred, truth)?,
            pur: purity(pred, truth)?,
        })
    }
}

/// Co-occurrence counts of predicted (rows) and true (columns) labels,
/// with both label sets compacted to `0..k` in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

impl Contingency {
    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0usize);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency, Error> {
    if pred.len() != truth.len() {
        return Err(Error::LabelLength {
            predicted: pred.len(),
            truth: truth.len(),
        });
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut counts = vec![vec![0usize; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        counts[a][b] += 1;
    }
    Ok(Contingency { counts, n: pred.len() })
}

/// Maximum-weight perfect matching on a square matrix (Hungarian method).
///
/// Returns `col[row]`.
pub fn hungarian_max(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    // Minimize the negated weights. 1-based potentials with a virtual column 0.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Fraction of samples matched under the best one-to-one relabeling of
/// predicted clusters onto true classes.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, Error> {
    let c = contingency(pred, truth)?;
    if c.n == 0 {
        return Ok(0.0);
    }
    let size = c.rows().max(c.cols());
    let mut w = vec![vec![0i64; size]; size];
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            w[i][j] = v as i64;
        }
    }
    let col = hungarian_max(&w);
    let matched: i64 = col.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
    Ok(matched as f64 / c.n as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the entropies;
/// 0 when either partition has zero entropy.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, Error> {
    let c = contingency(pred, truth)?;
    if c.n == 0 {
        return Ok(0.0);
    }
    let n = c.n as f64;
    let row_sums: Vec<usize> = c.counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..c.cols()).map(|j| c.counts.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(row_sums.iter().copied(), n);
    let ht = entropy(col_sums.iter().copied(), n);
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let pij = nij as f64 / n;
            mi += pij * libm::log(nij as f64 * n / (row_sums[i] as f64 * col_sums[j] as f64));
        }
    }
    Ok((mi / libm::sqrt(hp * ht)).clamp(0.0, 1.0))
}

/// `(1/N) sum over clusters of the largest class count inside the cluster`.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64, Error> {
    let c = contingency(pred, truth)?;
    if c.n == 0 {
        return Ok(0.0);
    }
    let hits: usize = c.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / c.n as f64)
}
