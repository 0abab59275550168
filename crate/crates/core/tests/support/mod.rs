//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls into the code under test
//! except to build inputs.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmcn_core::graph::{forward, Graph, OpKind};
use tmcn_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[lo, hi]` but at least `gap` away from `kink`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(w * op(inputs))` with a fixed random `w`.
pub fn op_gradient_error(kind: &OpKind, inputs: &[Tensor], seed: u64) -> f64 {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = forward(kind, &refs).unwrap();
    let w = random_tensor(&mut rng(seed), out.shape(), -1.0, 1.0);
    let objective = |xs: &[Tensor]| -> f64 {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let y = forward(kind, &refs).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = g.apply(kind.clone(), &vars).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for e in 0..inputs[k].len() {
            let numeric = central_difference(inputs, k, e, 1e-6, objective);
            worst = worst.max(rel_err(analytic.data()[e], numeric, 1e-3));
        }
    }
    worst
}

pub fn central_difference(inputs: &[Tensor], which: usize, entry: usize, h: f64, f: impl Fn(&[Tensor]) -> f64) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[entry] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[entry] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Selective scan written as the closed-form sum over source positions:
/// `y_t = sum_{s<=t} sum_j c_tj (prod_{r=s+1..t} exp(dt_r a_j)) dt_s b_sj x_s + d x_t`.
pub fn scan_oracle(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Tensor {
    let (n, l, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = a.shape()[1];
    let xv = |i: usize, t: usize, k: usize| x.data()[(i * l + t) * ch + k];
    let dv = |i: usize, t: usize, k: usize| delta.data()[(i * l + t) * ch + k];
    let bv = |i: usize, t: usize, j: usize| b.data()[(i * l + t) * s + j];
    let cv = |i: usize, t: usize, j: usize| c.data()[(i * l + t) * s + j];
    let mut out = vec![0.0; n * l * ch];
    for i in 0..n {
        for k in 0..ch {
            for t in 0..l {
                let mut y = d.data()[k] * xv(i, t, k);
                for src in 0..=t {
                    for j in 0..s {
                        let aj = a.data()[k * s + j];
                        let decay: f64 = (src + 1..=t).map(|r| (dv(i, r, k) * aj).exp()).product();
                        y += cv(i, t, j) * decay * dv(i, src, k) * bv(i, src, j) * xv(i, src, k);
                    }
                }
                out[(i * l + t) * ch + k] = y;
            }
        }
    }
    Tensor::new(vec![n, l, ch], out).unwrap()
}

/// `y[t] = bias + sum_j w[j] x[t - j]` with zero padding on the left.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let padded: Vec<f64> = std::iter::repeat_n(0.0, k - 1)
                .chain((0..l).map(|t| x.data()[(i * c + ch) * l + t]))
                .collect();
            for t in 0..l {
                let window = &padded[t..t + k];
                let mut acc = bias.data()[ch];
                for (j, wj) in w.data()[ch * k..(ch + 1) * k].iter().enumerate() {
                    acc += wj * window[k - 1 - j];
                }
                out[(i * c + ch) * l + t] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Best matched fraction over every bijection of `0..k` onto itself.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    (0..k)
        .permutations(k)
        .map(|perm| pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count())
        .max()
        .unwrap() as f64
        / pred.len() as f64
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn count(pred: &[usize], truth: &[usize], p: Option<usize>, t: Option<usize>) -> usize {
    pred.iter()
        .zip(truth)
        .filter(|(&a, &b)| p.is_none_or(|p| p == a) && t.is_none_or(|t| t == b))
        .count()
}

/// Scalar `I(p; t) / sqrt(H(p) H(t))`, 0 when an entropy vanishes.
pub fn nmi_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (ps, ts) = (distinct(pred), distinct(truth));
    let h = |labels: &[usize], pick: &dyn Fn(usize) -> usize| -> f64 {
        labels
            .iter()
            .map(|&v| {
                let q = pick(v) as f64 / n;
                -q * q.ln()
            })
            .sum()
    };
    let hp = h(&ps, &|v| count(pred, truth, Some(v), None));
    let ht = h(&ts, &|v| count(pred, truth, None, Some(v)));
    if hp == 0.0 || ht == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for &p in &ps {
        for &t in &ts {
            let joint = count(pred, truth, Some(p), Some(t)) as f64 / n;
            if joint > 0.0 {
                let pp = count(pred, truth, Some(p), None) as f64 / n;
                let pt = count(pred, truth, None, Some(t)) as f64 / n;
                mi += joint * (joint / (pp * pt)).ln();
            }
        }
    }
    mi / (hp * ht).sqrt()
}

pub fn purity_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let ts = distinct(truth);
    distinct(pred)
        .into_iter()
        .map(|p| ts.iter().map(|&t| count(pred, truth, Some(p), Some(t))).max().unwrap())
        .sum::<usize>() as f64
        / pred.len() as f64
}

/// Optimal 2-means of 1-D points by enumerating every split into two
/// non-empty groups; returns the sorted centers.
pub fn brute_force_two_means(points: &[f64]) -> (f64, f64) {
    let n = points.len();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for mask in 1..(1u32 << n) - 1 {
        let (a, b): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, &p) in points.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(p)
                } else {
                    b.push(p)
                }
            }
            (a, b)
        };
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let sse: f64 =
            a.iter().map(|p| (p - ma).powi(2)).sum::<f64>() + b.iter().map(|p| (p - mb).powi(2)).sum::<f64>();
        if sse < best.0 {
            best = (sse, ma.min(mb), ma.max(mb));
        }
    }
    (best.1, best.2)
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Pairwise cosine matrix by double loop.
pub fn cosine_matrix_oracle(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.iter().map(|a| z.iter().map(|b| cos(a, b)).collect()).collect()
}

/// The contrastive objective evaluated term by term with plain floats.
/// Returns `(loss, floored denominators)`.
pub fn ascl_oracle(
    fused: &[Vec<f64>],
    views: &[Vec<Vec<f64>>],
    s: &[Vec<f64>],
    tau: f64,
    self_excluded: bool,
    floor: f64,
) -> (f64, usize) {
    let n = fused.len();
    let mut sum = 0.0;
    let mut clamped = 0;
    for view in views {
        for i in 0..n {
            let num = (cos(&fused[i], &view[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if self_excluded && j == i {
                    continue;
                }
                den += ((1.0 - s[i][j]) * cos(&fused[i], &view[j]) / tau).exp();
            }
            if !self_excluded {
                den -= (1.0 / tau).exp();
                if den < floor {
                    den = floor;
                    clamped += 1;
                }
            }
            sum += (num / den).ln();
        }
    }
    (-sum / (2.0 * n as f64), clamped)
}

/// `sum_m sum_i sum_j (x - r)^2` by explicit loops.
pub fn reconstruction_oracle(inputs: &[Tensor], recons: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (x, r) in inputs.iter().zip(recons) {
        for i in 0..x.rows() {
            for j in 0..x.row_len() {
                let d = x.row(i)[j] - r.row(i)[j];
                total += d * d;
            }
        }
    }
    total
}

/// Row-wise 2-D array view of a matrix tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}
