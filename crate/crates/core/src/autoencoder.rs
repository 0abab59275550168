//! Per-view encoder/decoder pairs and the reconstruction objective.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Mlp, ParamStore};

/// Encoder `D_m -> hidden.. -> embed_dim` with a mirrored decoder.
#[derive(Clone, Debug)]
pub struct ViewAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ViewAutoencoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        view: usize,
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let encoder = Mlp::new(store, &alloc::format!("view{view}.encoder"), &dims, rng);
        dims.reverse();
        let decoder = Mlp::new(store, &alloc::format!("view{view}.decoder"), &dims, rng);
        Self { encoder, decoder }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    /// `[n, D_m] -> [n, d_m]`
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        check_cols("encode", g, x, self.input_dim())?;
        self.encoder.forward(g, p, x)
    }

    /// `[n, d_m] -> [n, D_m]`
    pub fn decode(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, TensorError> {
        check_cols("decode", g, z, self.embed_dim())?;
        self.decoder.forward(g, p, z)
    }
}

fn check_cols(op: &'static str, g: &Graph, x: Var, cols: usize) -> Result<(), TensorError> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != cols {
        return Err(TensorError::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: alloc::vec![shape.first().copied().unwrap_or(0), cols],
        });
    }
    Ok(())
}

/// Squared reconstruction error summed over views, samples and features.
pub fn reconstruction_loss(g: &mut Graph, inputs: &[Var], recons: &[Var]) -> Result<Var, TensorError> {
    if inputs.len() != recons.len() || inputs.is_empty() {
        return Err(TensorError::Arity {
            op: "reconstruction_loss",
            expected: inputs.len(),
            actual: recons.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&x, &r) in inputs.iter().zip(recons) {
        let diff = g.sub(x, r)?;
        let sq = g.square(diff)?;
        let view_loss = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, view_loss)?,
            None => view_loss,
        });
    }
    Ok(total.expect("at least one view"))
}
