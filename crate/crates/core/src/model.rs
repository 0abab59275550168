//! The full network: view autoencoders, fusion, projection heads.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ascl::ProjectionHeads;
use crate::autoencoder::ViewAutoencoder;
use crate::error::{Error, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::tmfn::{Tmfn, TmfnConfig};

/// How view embeddings become one fused vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    /// Selective-scan fusion network.
    #[default]
    Tmfn,
    /// Plain concatenation of the view embeddings.
    Concat,
}

/// Which fused quantity feeds the fused projection head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadInput {
    /// The flattened contracted sequence `u` (`M*l*d`).
    #[default]
    Fused,
    /// The flattened gated sequence before contraction (`M*l*d'`).
    Gated,
}

impl HeadInput {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadInput::Fused => "fused",
            HeadInput::Gated => "gated",
        }
    }
}

impl core::str::FromStr for HeadInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "fused" => Ok(HeadInput::Fused),
            "gated" => Ok(HeadInput::Gated),
            other => Err(Error::Config(alloc::format!("unknown head input {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub view_dims: Vec<usize>,
    /// Encoder hidden widths; decoders mirror them.
    pub hidden: Vec<usize>,
    pub tmfn: TmfnConfig,
    pub proj_dim: usize,
    pub fusion: Fusion,
    pub head_input: HeadInput,
    /// Min-max scale views before every forward pass over a dataset.
    pub normalize: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let t = &self.tmfn;
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return Err(Error::Config("every view needs dimension >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if t.seq_len == 0 || t.token_dim == 0 || t.expansion == 0 || t.state_size == 0 || t.conv_width == 0 {
            return Err(Error::Config(
                "seq_len, token_dim, expansion, state_size and conv_width must be positive".into(),
            ));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.tmfn.fused_dim(self.view_dims.len())
    }

    fn head_dim(&self) -> usize {
        match (self.fusion, self.head_input) {
            (Fusion::Tmfn, HeadInput::Gated) => self.fused_dim() * self.tmfn.expansion,
            _ => self.fused_dim(),
        }
    }
}

/// Graph handles produced by [`TmcnModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub inputs: Vec<Var>,
    pub embeddings: Vec<Var>,
    pub reconstructions: Vec<Var>,
    /// Fused vector `u` (or the concatenated embeddings without fusion).
    pub fused: Var,
    pub h_hat: Var,
    pub h_views: Vec<Var>,
}

/// Every learnable parameter and the modules that address them.
#[derive(Clone, Debug)]
pub struct TmcnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub autoencoders: Vec<ViewAutoencoder>,
    pub tmfn: Tmfn,
    pub heads: ProjectionHeads,
}

impl TmcnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = config.tmfn.embed_dim();
        let autoencoders = config
            .view_dims
            .iter()
            .enumerate()
            .map(|(m, &dim)| ViewAutoencoder::new(&mut store, m, dim, &config.hidden, embed, &mut rng))
            .collect();
        let tmfn = Tmfn::new(&mut store, config.tmfn, &mut rng);
        let view_embed: Vec<usize> = config.view_dims.iter().map(|_| embed).collect();
        let heads = ProjectionHeads::new(&mut store, config.head_dim(), &view_embed, config.proj_dim, &mut rng);
        Ok(Self {
            config,
            store,
            autoencoders,
            tmfn,
            heads,
        })
    }

    pub fn n_views(&self) -> usize {
        self.autoencoders.len()
    }

    /// Encodes and decodes every view of a batch. Returns the input,
    /// embedding and reconstruction nodes, one of each per view.
    #[allow(clippy::type_complexity)]
    pub fn forward_reconstruction(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[Tensor],
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>), Error> {
        self.check_views(batch.len())?;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        let mut recons = Vec::with_capacity(batch.len());
        for (ae, x) in self.autoencoders.iter().zip(batch) {
            let xv = g.constant(x.clone());
            let z = ae.encode(g, p, xv)?;
            let r = ae.decode(g, p, z)?;
            inputs.push(xv);
            embeddings.push(z);
            recons.push(r);
        }
        Ok((inputs, embeddings, recons))
    }

    /// Fused vector and the tensor handed to the fused projection head.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, embeddings: &[Var]) -> Result<(Var, Var), TensorError> {
        match self.config.fusion {
            Fusion::Tmfn => {
                let out = self.tmfn.forward(g, p, embeddings)?;
                let head_in = match self.config.head_input {
                    HeadInput::Fused => out.fused,
                    HeadInput::Gated => out.gated,
                };
                Ok((out.fused, head_in))
            }
            Fusion::Concat => {
                let u = g.concat(embeddings, 1)?;
                Ok((u, u))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[Tensor]) -> Result<ForwardPass, Error> {
        let (inputs, embeddings, reconstructions) = self.forward_reconstruction(g, p, batch)?;
        let (fused, head_in) = self.fuse(g, p, &embeddings)?;
        let (h_hat, h_views) = self.heads.project(g, p, head_in, &embeddings)?;
        Ok(ForwardPass {
            inputs,
            embeddings,
            reconstructions,
            fused,
            h_hat,
            h_views,
        })
    }

    fn check_views(&self, m: usize) -> Result<(), Error> {
        if m != self.n_views() {
            return Err(Error::Dataset(alloc::format!(
                "model expects {} views, got {m}",
                self.n_views()
            )));
        }
        Ok(())
    }

    /// Runs the network without gradients over all rows, `chunk` rows at a
    /// time, and returns `(fused u, projected h_hat)`.
    pub fn represent(&self, views: &[Tensor], chunk: usize) -> Result<(Tensor, Tensor), Error> {
        self.check_views(views.len())?;
        for (m, (v, &d)) in views.iter().zip(&self.config.view_dims).enumerate() {
            if v.row_len() != d {
                return Err(Error::Dataset(alloc::format!(
                    "view {m} has {} features, model expects {d}",
                    v.row_len()
                )));
            }
        }
        let n = views[0].rows();
        let chunk = chunk.max(1);
        let mut fused = Vec::new();
        let mut projected = Vec::new();
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch: Vec<Tensor> = views.iter().map(|v| v.select_rows(&idx)).collect();
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let (_, embeddings, _) = self.forward_reconstruction(&mut g, &p, &batch)?;
            let (u, head_in) = self.fuse(&mut g, &p, &embeddings)?;
            let h = self.heads.project_fused(&mut g, &p, head_in)?;
            fused.extend_from_slice(g.value(u).data());
            projected.extend_from_slice(g.value(h).data());
            start += chunk;
        }
        let fused_w = fused.len() / n;
        let proj_w = projected.len() / n;
        Ok((
            Tensor::new(alloc::vec![n, fused_w], fused)?,
            Tensor::new(alloc::vec![n, proj_w], projected)?,
        ))
    }
}
