//! Multi-view datasets, min-max normalization and a seeded synthetic
//! generator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::tensor::Tensor;

/// `M` feature matrices over the same `N` samples, plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    views: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    n_clusters: Option<usize>,
}

impl MultiViewDataset {
    /// Validates and builds a dataset.
    ///
    /// `n_clusters` defaults to `max(label) + 1` when labels are present.
    pub fn new(
        name: impl Into<String>,
        views: Vec<Tensor>,
        labels: Option<Vec<usize>>,
        n_clusters: Option<usize>,
    ) -> Result<Self, Error> {
        let first = views
            .first()
            .ok_or_else(|| Error::Dataset("a dataset needs at least one view".into()))?;
        let n = first.rows();
        for (m, v) in views.iter().enumerate() {
            if v.rank() != 2 {
                return Err(Error::Dataset(alloc::format!(
                    "view {m} must be a matrix, got shape {:?}",
                    v.shape()
                )));
            }
            if v.rows() != n {
                return Err(Error::Dataset(alloc::format!(
                    "row-count mismatch: view 0 has {n} rows, view {m} has {}",
                    v.rows()
                )));
            }
        }
        let n_clusters = match (&labels, n_clusters) {
            (Some(l), k) => {
                if l.len() != n {
                    return Err(Error::Dataset(alloc::format!(
                        "label count {} does not match {n} samples",
                        l.len()
                    )));
                }
                let max = l.iter().copied().max().unwrap_or(0);
                let k = k.unwrap_or(max + 1);
                if max >= k {
                    return Err(Error::Dataset(alloc::format!(
                        "label out of range: {max} >= {k} clusters"
                    )));
                }
                let mut seen = vec![false; k];
                l.iter().for_each(|&c| seen[c] = true);
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(Error::Dataset(alloc::format!(
                        "cluster {missing} of {k} has no samples"
                    )));
                }
                Some(k)
            }
            (None, k) => k,
        };
        Ok(Self {
            name: name.into(),
            views,
            labels,
            n_clusters,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Tensor::row_len).collect()
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_clusters(&self) -> Option<usize> {
        self.n_clusters
    }

    /// All views side by side, `[N, sum D_m]`.
    pub fn concatenated(&self) -> Tensor {
        let n = self.n_samples();
        let width: usize = self.view_dims().iter().sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for v in &self.views {
                data.extend_from_slice(v.row(i));
            }
        }
        Tensor::from_parts(vec![n, width], data)
    }

    /// Rows `idx` of every view.
    pub fn batch(&self, idx: &[usize]) -> Vec<Tensor> {
        self.views.iter().map(|v| v.select_rows(idx)).collect()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }
}

/// Scales every feature column to `[0, 1]`; constant columns become 0.
pub fn normalize_views(dataset: &MultiViewDataset) -> MultiViewDataset {
    let views = dataset
        .views
        .iter()
        .map(|v| {
            let (n, d) = (v.rows(), v.row_len());
            let mut out = v.clone();
            let data = out.data_mut();
            for j in 0..d {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..n {
                    lo = lo.min(data[i * d + j]);
                    hi = hi.max(data[i * d + j]);
                }
                let range = hi - lo;
                for i in 0..n {
                    let x = &mut data[i * d + j];
                    *x = if range > 0.0 {
                        ((*x - lo) / range).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                }
            }
            out
        })
        .collect();
    MultiViewDataset {
        views,
        ..dataset.clone()
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub view_dims: Vec<usize>,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n_clusters == 0 {
            return Err(Error::Config("synthetic data needs at least one cluster".into()));
        }
        if self.n_samples < self.n_clusters {
            return Err(Error::Config(alloc::format!(
                "n_samples ({}) must be >= n_clusters ({})",
                self.n_samples,
                self.n_clusters
            )));
        }
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return Err(Error::Config("every view needs dimension >= 1".into()));
        }
        if !(self.separation > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Config("separation and noise_std must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian clusters in a `k`-dimensional latent space, observed through one
/// random linear map per view plus isotropic noise.
///
/// Centroids are `separation * N(0, I)`, samples scatter around their
/// centroid with unit variance, and labels are balanced to within one.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset, Error> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.n_clusters;
    let latent = k.max(2);
    let n = spec.n_samples;
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let centroids: Vec<f64> = (0..k * latent).map(|_| spec.separation * normal(&mut rng)).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let points: Vec<f64> = labels
        .iter()
        .flat_map(|&c| (0..latent).map(move |j| (c, j)))
        .map(|(c, j)| centroids[c * latent + j] + normal(&mut rng))
        .collect();

    let scale = 1.0 / libm::sqrt(latent as f64);
    let views = spec
        .view_dims
        .iter()
        .map(|&dim| {
            let map: Vec<f64> = (0..latent * dim).map(|_| scale * normal(&mut rng)).collect();
            let mut data = vec![0.0; n * dim];
            for i in 0..n {
                let z = &points[i * latent..(i + 1) * latent];
                for o in 0..dim {
                    let mut acc = 0.0;
                    for (j, zj) in z.iter().enumerate() {
                        acc += zj * map[j * dim + o];
                    }
                    data[i * dim + o] = acc + spec.noise_std * normal(&mut rng);
                }
            }
            Tensor::from_parts(vec![n, dim], data)
        })
        .collect();
    MultiViewDataset::new(
        alloc::format!("synthetic-n{n}-k{k}-s{}", spec.seed),
        views,
        Some(labels),
        Some(k),
    )
}
