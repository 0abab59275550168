//! Average-similarity contrastive alignment.
//!
//! The fused projection of sample `i` is pulled towards the view projections
//! of the same sample, while the pushing force on every other sample `j` is
//! scaled by `1 - S_ij`, where `S` is the view-averaged cosine similarity of
//! the view embeddings. Pairs that look alike in every view are repelled
//! less, so samples from the same cluster are not torn apart.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, TensorError};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{Bound, Mlp, ParamStore};
use crate::tensor::{l2_norm, Tensor};

/// How the denominator of each log-ratio is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AsclMode {
    /// Sum over every `j` (including `i`) minus `e^(1/tau)`, floored at `eps`.
    Literal,
    /// Sum over `j != i`, no subtraction.
    #[default]
    SelfExcluded,
}

impl AsclMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AsclMode::Literal => "literal",
            AsclMode::SelfExcluded => "self-excluded",
        }
    }
}

impl core::str::FromStr for AsclMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "literal" => Ok(AsclMode::Literal),
            "self-excluded" | "self_excluded" => Ok(AsclMode::SelfExcluded),
            other => Err(Error::Config(alloc::format!("unknown ascl mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsclConfig {
    pub temperature: f64,
    pub mode: AsclMode,
    pub denominator_floor: f64,
}

impl Default for AsclConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            mode: AsclMode::SelfExcluded,
            denominator_floor: 1e-8,
        }
    }
}

impl AsclConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(alloc::format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.denominator_floor > 0.0) {
            return Err(Error::Config(alloc::format!(
                "denominator floor must be > 0, got {}",
                self.denominator_floor
            )));
        }
        Ok(())
    }
}

/// Pairwise cosine similarity of the rows of `z` (`[n, d] -> [n, n]`).
///
/// The diagonal is pinned to 1 and the matrix is symmetrized so the
/// structural invariants hold bit-for-bit.
pub fn view_similarity(z: &Tensor) -> Tensor {
    let n = z.rows();
    let d = z.row_len();
    let norms: Vec<f64> = (0..n).map(|i| l2_norm(z.row(i)) + math::NORM_EPS).collect();
    let mut s = Tensor::zeros(&[n, n]);
    let out = s.data_mut();
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    debug_assert_eq!(z.len(), n * d);
    s
}

/// Element-wise mean of per-view similarity matrices.
pub fn average_similarity(per_view: &[Tensor]) -> Result<Tensor, TensorError> {
    let first = per_view.first().ok_or(TensorError::Arity {
        op: "average_similarity",
        expected: 1,
        actual: 0,
    })?;
    let mut acc = Tensor::zeros(first.shape());
    for s in per_view {
        if s.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "average_similarity",
                left: first.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        for (a, b) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
    let m = per_view.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= m);
    Ok(acc)
}

/// Checks symmetry, unit diagonal and the `[-1, 1]` range.
pub fn check_similarity(s: &Tensor) -> bool {
    let n = s.rows();
    let d = s.data();
    (0..n).all(|i| {
        d[i * n + i] == 1.0 && (0..n).all(|j| d[i * n + j] == d[j * n + i] && (-1.0..=1.0).contains(&d[i * n + j]))
    })
}

/// Fused head (`fused_dim -> proj`) and one head per view (`embed -> proj`).
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub fused: Mlp,
    pub views: Vec<Mlp>,
}

impl ProjectionHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        fused_dim: usize,
        view_dims: &[usize],
        proj_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fused = Mlp::new(store, "head.fused", &[fused_dim, proj_dim, proj_dim], rng);
        let views = view_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| Mlp::new(store, &alloc::format!("head.view{m}"), &[d, proj_dim, proj_dim], rng))
            .collect();
        Self { fused, views }
    }

    pub fn proj_dim(&self) -> usize {
        self.fused.out_dim()
    }

    /// Returns `(h_hat, [h^m])`.
    pub fn project(&self, g: &mut Graph, p: &Bound, fused: Var, views: &[Var]) -> Result<(Var, Vec<Var>), TensorError> {
        if views.len() != self.views.len() {
            return Err(TensorError::Arity {
                op: "project",
                expected: self.views.len(),
                actual: views.len(),
            });
        }
        let h_hat = self.project_fused(g, p, fused)?;
        let hs = self
            .views
            .iter()
            .zip(views)
            .map(|(head, &z)| {
                check_width(g, z, head.in_dim())?;
                head.forward(g, p, z)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((h_hat, hs))
    }

    pub fn project_fused(&self, g: &mut Graph, p: &Bound, fused: Var) -> Result<Var, TensorError> {
        check_width(g, fused, self.fused.in_dim())?;
        self.fused.forward(g, p, fused)
    }
}

fn check_width(g: &Graph, x: Var, width: usize) -> Result<(), TensorError> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(TensorError::ShapeMismatch {
            op: "project",
            left: shape.to_vec(),
            right: alloc::vec![shape.first().copied().unwrap_or(0), width],
        });
    }
    Ok(())
}

/// How many log-ratio denominators hit the floor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampStats {
    pub clamped: usize,
    pub total: usize,
}

impl ClampStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: ClampStats) {
        self.clamped += other.clamped;
        self.total += other.total;
    }
}

/// Contrastive loss
/// `-(1/2N) sum_i sum_m log( e^{C(h_i, h_i^m)/tau} / den_i^m )`
/// with `den_i^m = sum_j e^{(1 - S_ij) C(h_i, h_j^m) / tau}` formed per `config.mode`.
///
/// `similarity` is treated as a constant.
pub fn ascl_loss(
    g: &mut Graph,
    fused: Var,
    views: &[Var],
    similarity: &Tensor,
    config: &AsclConfig,
) -> Result<(Var, ClampStats), Error> {
    config.validate()?;
    let shape = g.shape(fused).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "ascl_loss",
            shape,
            reason: "expected [batch, dim]",
        }
        .into());
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if similarity.shape() != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "ascl_loss",
            left: shape,
            right: similarity.shape().to_vec(),
        }
        .into());
    }
    let tau = config.temperature;
    let weights = g.constant(similarity.map(|s| (1.0 - s) / tau));
    let eye = g.constant(Tensor::identity(n));
    let off_diag = g.constant(Tensor::identity(n).map(|v| 1.0 - v));
    let mut stats = ClampStats::default();
    let mut total: Option<Var> = None;
    for &h in views {
        if g.shape(h) != g.shape(fused) {
            return Err(TensorError::ShapeMismatch {
                op: "ascl_loss",
                left: g.shape(fused).to_vec(),
                right: g.shape(h).to_vec(),
            }
            .into());
        }
        let cos = g.cosine_similarity_matrix(fused, h)?;
        let pos_diag = g.mul(cos, eye)?;
        let pos = g.sum_axis(pos_diag, 1)?;
        let pos = g.scale(pos, 1.0 / tau)?;
        let logits = g.mul(cos, weights)?;
        let e = g.exp(logits)?;
        let den = match config.mode {
            AsclMode::SelfExcluded => {
                let masked = g.mul(e, off_diag)?;
                g.sum_axis(masked, 1)?
            }
            AsclMode::Literal => {
                let row = g.sum_axis(e, 1)?;
                let raw = g.add_scalar(row, -math::exp(1.0 / tau))?;
                let floor = config.denominator_floor;
                let clamped = g.value(raw).data().iter().filter(|&&v| v < floor).count();
                if clamped > 0 {
                    log::debug!("ascl: {clamped} of {n} denominators floored");
                }
                stats.clamped += clamped;
                g.clamp_min(raw, floor)?
            }
        };
        stats.total += n;
        let log_den = g.log(den)?;
        let term = g.sub(pos, log_den)?;
        let s = g.sum(term)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or(TensorError::Arity {
        op: "ascl_loss",
        expected: 1,
        actual: 0,
    })?;
    let loss = g.scale(total, -1.0 / (2.0 * n as f64))?;
    Ok((loss, stats))
}
