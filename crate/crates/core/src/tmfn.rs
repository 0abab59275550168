//! Selective-scan fusion network.
//!
//! View embeddings are cut into short token sequences, the sequences of all
//! views are concatenated in view order, and one Mamba-style block mixes
//! them:
//!
//! ```text
//! e  = concat_m reshape(z^m)            [n, M*l, d]
//! p  = e W1,  q = e W2                  [n, L, d']
//! p" = silu(conv1d_causal(p))           depthwise over the sequence axis
//! p* = scan(p")                         input-dependent B, C and step size
//! a' = (p* * silu(q)) W3                [n, L, d]
//! u  = flatten(a')                      [n, M*l*d]
//! ```
//!
//! The scan uses the zero-order-hold style update
//! `h_t = exp(dt_t * A) h_{t-1} + (dt_t * B_t) x_t`, `y_t = <C_t, h_t> + D x_t`
//! with `dt_t = softplus(dt_proj(x_t))` and `A = -exp(a_log) < 0`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::TensorError;
use crate::graph::{Graph, ScanInputs, Var};
use crate::math;
use crate::nn::{uniform, Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TmfnConfig {
    /// Tokens per view (`l`).
    pub seq_len: usize,
    /// Token width (`d`).
    pub token_dim: usize,
    /// Expansion factor (`d' = d * expansion`).
    pub expansion: usize,
    /// SSM state size per channel.
    pub state_size: usize,
    /// Causal convolution width.
    pub conv_width: usize,
}

impl Default for TmfnConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            token_dim: 16,
            expansion: 2,
            state_size: 16,
            conv_width: 4,
        }
    }
}

impl TmfnConfig {
    pub fn inner_dim(&self) -> usize {
        self.token_dim * self.expansion
    }

    /// Required width of every view embedding (`l * d`).
    pub fn embed_dim(&self) -> usize {
        self.seq_len * self.token_dim
    }

    /// Length of the fused vector for `views` views.
    pub fn fused_dim(&self, views: usize) -> usize {
        views * self.embed_dim()
    }
}

/// Learnable parameters of the fusion block.
#[derive(Clone, Debug)]
pub struct MambaParams {
    pub w1: Linear,
    pub w2: Linear,
    /// `[d', conv_width]`, column `j` weights lag `j`.
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub dt_proj: Linear,
    /// `[d', n]`; the state matrix is `-exp(a_log)`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w3: Linear,
}

#[derive(Clone, Debug)]
pub struct Tmfn {
    pub config: TmfnConfig,
    pub params: MambaParams,
}

/// Outputs of a full fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `[n, M*l*d]`
    pub fused: Var,
    /// Gated sequence before the contraction, flattened to `[n, M*l*d']`.
    pub gated: Var,
}

impl Tmfn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TmfnConfig, rng: &mut R) -> Self {
        let d = config.token_dim;
        let di = config.inner_dim();
        let n = config.state_size;
        let k = config.conv_width;
        let w1 = Linear::new(store, "tmfn.w1", d, di, true, rng);
        let w2 = Linear::new(store, "tmfn.w2", d, di, true, rng);
        let conv_bound = 1.0 / math::sqrt(k as f64);
        let conv_kernel = store.add("tmfn.conv.kernel", uniform(rng, &[di, k], conv_bound));
        let conv_bias = store.add("tmfn.conv.bias", uniform(rng, &[di], conv_bound));
        let b_proj = Linear::new(store, "tmfn.b_proj", di, n, false, rng);
        let c_proj = Linear::new(store, "tmfn.c_proj", di, n, false, rng);
        let dt_proj = Linear::new(store, "tmfn.dt_proj", di, di, true, rng);
        *store.get_mut(dt_proj.weight) = uniform(rng, &[di, di], 1.0 / math::sqrt(di as f64));
        // step sizes start log-uniform in [0.01, 0.1]
        let (lo, hi) = (math::ln(0.01), math::ln(0.1));
        let dt_bias = store.get_mut(dt_proj.bias.expect("dt_proj has a bias"));
        for v in dt_bias.data_mut() {
            let dt = math::exp(rng.random_range(lo..=hi));
            *v = math::softplus_inv(dt);
        }
        let mut a_log = Tensor::zeros(&[di, n]);
        for (i, v) in a_log.data_mut().iter_mut().enumerate() {
            *v = math::ln((i % n + 1) as f64);
        }
        let a_log = store.add("tmfn.a_log", a_log);
        let d_skip = store.add("tmfn.d_skip", Tensor::full(&[di], 1.0));
        let w3 = Linear::new(store, "tmfn.w3", di, d, true, rng);
        Self {
            config,
            params: MambaParams {
                w1,
                w2,
                conv_kernel,
                conv_bias,
                b_proj,
                c_proj,
                dt_proj,
                a_log,
                d_skip,
                w3,
            },
        }
    }

    /// Fuses per-view embeddings `[n, l*d]` into `[n, M*l*d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, views: &[Var]) -> Result<FusionOutput, TensorError> {
        let TmfnConfig { seq_len, token_dim, .. } = self.config;
        let seqs = views
            .iter()
            .map(|&z| fine_grain(g, z, seq_len, token_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let e = concat_views(g, &seqs)?;
        let (pb, qb) = self.branch_project(g, p, e)?;
        let conv = self.conv_branch(g, p, pb)?;
        let scan_in = g.transpose(conv)?;
        let scanned = self.selective_scan(g, p, scan_in)?;
        let (gated, contracted) = self.gate_and_contract(g, p, scanned, qb)?;
        let fused = convert_to_vector(g, contracted)?;
        let gated = convert_to_vector(g, gated)?;
        Ok(FusionOutput { fused, gated })
    }

    /// `p = e W1`, `q = e W2` position-wise; `[n, L, d] -> 2 x [n, L, d']`.
    pub fn branch_project(&self, g: &mut Graph, p: &Bound, e: Var) -> Result<(Var, Var), TensorError> {
        let pb = self.params.w1.forward_positionwise(g, p, e)?;
        let qb = self.params.w2.forward_positionwise(g, p, e)?;
        Ok((pb, qb))
    }

    /// Channels-first causal depthwise convolution followed by SiLU;
    /// `[n, L, d'] -> [n, d', L]`.
    pub fn conv_branch(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let channels_first = g.transpose(x)?;
        let conv = g.conv1d_depthwise(
            channels_first,
            p.var(self.params.conv_kernel),
            p.var(self.params.conv_bias),
        )?;
        g.silu(conv)
    }

    /// Selective scan over `[n, L, d']`.
    pub fn selective_scan(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let dt_logits = self.params.dt_proj.forward_positionwise(g, p, x)?;
        let delta = g.softplus(dt_logits)?;
        let b = self.params.b_proj.forward_positionwise(g, p, x)?;
        let c = self.params.c_proj.forward_positionwise(g, p, x)?;
        let a_pos = g.exp(p.var(self.params.a_log))?;
        let a = g.scale(a_pos, -1.0)?;
        g.selective_scan(ScanInputs {
            x,
            delta,
            a,
            b,
            c,
            d: p.var(self.params.d_skip),
        })
    }

    /// `a = p* * silu(q)` then `a' = a W3`. Returns `(a, a')`.
    pub fn gate_and_contract(&self, g: &mut Graph, p: &Bound, scanned: Var, q: Var) -> Result<(Var, Var), TensorError> {
        let gate = g.silu(q)?;
        let a = g.mul(scanned, gate)?;
        let contracted = self.params.w3.forward_positionwise(g, p, a)?;
        Ok((a, contracted))
    }
}

/// Row-major reshape `[n, l*d] -> [n, l, d]`.
pub fn fine_grain(g: &mut Graph, z: Var, seq_len: usize, token_dim: usize) -> Result<Var, TensorError> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != seq_len * token_dim {
        return Err(TensorError::ShapeMismatch {
            op: "fine_grain",
            left: shape,
            right: alloc::vec![seq_len, token_dim],
        });
    }
    g.reshape(z, &[shape[0], seq_len, token_dim])
}

/// Concatenates `[n, l, d]` sequences along the sequence axis in view order.
pub fn concat_views(g: &mut Graph, seqs: &[Var]) -> Result<Var, TensorError> {
    g.concat(seqs, 1)
}

/// Row-major flatten `[n, L, d] -> [n, L*d]`.
pub fn convert_to_vector(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "convert_to_vector",
            shape,
            reason: "expected [batch, length, width]",
        });
    }
    g.reshape(x, &[shape[0], shape[1] * shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(config: TmfnConfig) -> (ParamStore, Tmfn) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let t = Tmfn::new(&mut store, config, &mut rng);
        (store, t)
    }

    #[test]
    fn fine_grain_is_row_major() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 6, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = fine_grain(&mut g, z, 2, 3).unwrap();
        assert_eq!(g.shape(e), &[1, 2, 3]);
        assert_eq!(g.value(e).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(fine_grain(&mut g, z, 4, 2).is_err());
    }

    #[test]
    fn concat_puts_views_in_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(alloc::vec![1, 1, 2], alloc::vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(alloc::vec![1, 1, 2], alloc::vec![3.0, 4.0]).unwrap());
        let e = concat_views(&mut g, &[a, b]).unwrap();
        assert_eq!(g.shape(e), &[1, 2, 2]);
        assert_eq!(g.value(e).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = g.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(concat_views(&mut g, &[a, bad]).is_err());
    }

    #[test]
    fn state_matrix_is_negative_and_step_sizes_small() {
        let config = TmfnConfig {
            seq_len: 2,
            token_dim: 3,
            expansion: 2,
            state_size: 3,
            conv_width: 2,
        };
        let (store, t) = block(config);
        let a_log = store.get(t.params.a_log);
        for (i, v) in a_log.data().iter().enumerate() {
            assert!((math::exp(*v) - (i % 3 + 1) as f64).abs() < 1e-12);
        }
        let bias = store.get(t.params.dt_proj.bias.unwrap());
        for v in bias.data() {
            let dt = math::softplus(*v);
            assert!((0.01 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn fused_shape_law() {
        let config = TmfnConfig {
            seq_len: 4,
            token_dim: 16,
            expansion: 2,
            state_size: 4,
            conv_width: 4,
        };
        let (store, t) = block(config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let views: Vec<Var> = (0..3).map(|_| g.constant(Tensor::full(&[2, 64], 0.1))).collect();
        let out = t.forward(&mut g, &p, &views).unwrap();
        assert_eq!(g.shape(out.fused), &[2, 192]);
        assert_eq!(g.shape(out.gated), &[2, 384]);
        assert_eq!(config.fused_dim(3), 192);
    }

    #[test]
    fn closed_gate_zeroes_the_sequence() {
        let config = TmfnConfig {
            seq_len: 1,
            token_dim: 2,
            expansion: 1,
            state_size: 2,
            conv_width: 1,
        };
        let (store, t) = block(config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let scanned = g.constant(Tensor::new(alloc::vec![1, 1, 2], alloc::vec![3.0, -4.0]).unwrap());
        let q = g.constant(Tensor::zeros(&[1, 1, 2]));
        let (a, _) = t.gate_and_contract(&mut g, &p, scanned, q).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }
}
