//! Gradient checks shared by the gradient tests and the acceptance suite.

use rand::Rng;
use tmcn_core::ascl::{ascl_loss, average_similarity, view_similarity, AsclConfig};
use tmcn_core::autoencoder::reconstruction_loss;
use tmcn_core::graph::{Graph, OpKind};
use tmcn_core::model::{Fusion, HeadInput, ModelConfig, TmcnModel};
use tmcn_core::tmfn::TmfnConfig;
use tmcn_core::Tensor;

use super::*;

/// One instance of every op in the catalog.
pub fn catalog() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul(-1.7),
        OpKind::AddScalar(0.3),
        OpKind::AddBias,
        OpKind::Reshape(vec![0]),
        OpKind::Concat(0),
        OpKind::Slice {
            axis: 0,
            start: 0,
            end: 0,
        },
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::SumAxis(0),
        OpKind::Mean,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Silu,
        OpKind::Relu,
        OpKind::Square,
        OpKind::ClampMin(0.2),
        OpKind::L2Norm(0),
        OpKind::CosineSimilarityMatrix,
        OpKind::Conv1dDepthwise,
        OpKind::SelectiveScan,
    ]
}

fn dims(r: &mut rand_chacha::ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(1..5)).collect()
}

/// A random, well-conditioned instance of `template` (shape-carrying
/// variants get concrete arguments).
pub fn instance(template: &OpKind, seed: u64) -> (OpKind, Vec<Tensor>) {
    let r = &mut rng(seed);
    let any = |r: &mut _, s: &[usize]| random_tensor(r, s, -2.0, 2.0);
    match template {
        OpKind::MatMul => {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            (OpKind::MatMul, vec![any(r, &[m, k]), any(r, &[k, n])])
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let rank = r.random_range(1..4);
            let s = dims(r, rank);
            (template.clone(), vec![any(r, &s), any(r, &s)])
        }
        OpKind::ScalarMul(_)
        | OpKind::AddScalar(_)
        | OpKind::Exp
        | OpKind::Softplus
        | OpKind::Sigmoid
        | OpKind::Silu
        | OpKind::Square
        | OpKind::Sum
        | OpKind::Mean => {
            let rank = r.random_range(1..4);
            let s = dims(r, rank);
            (template.clone(), vec![any(r, &s)])
        }
        OpKind::AddBias => {
            let rank = r.random_range(1..4);
            let s = dims(r, rank);
            let b = any(r, &[*s.last().unwrap()]);
            (OpKind::AddBias, vec![any(r, &s), b])
        }
        OpKind::Reshape(_) => {
            let s = dims(r, 3);
            let flat = vec![s[0] * s[1], s[2]];
            (OpKind::Reshape(flat), vec![any(r, &s)])
        }
        OpKind::Concat(_) => {
            let mut s = dims(r, 3);
            let axis = r.random_range(0..3);
            let parts = (0..r.random_range(1..4))
                .map(|_| {
                    s[axis] = r.random_range(1..4);
                    any(r, &s)
                })
                .collect();
            (OpKind::Concat(axis), parts)
        }
        OpKind::Slice { .. } => {
            let mut s = dims(r, 3);
            let axis = r.random_range(0..3);
            s[axis] = r.random_range(2..6);
            let start = r.random_range(0..s[axis] - 1);
            let end = r.random_range(start + 1..=s[axis]);
            (OpKind::Slice { axis, start, end }, vec![any(r, &s)])
        }
        OpKind::Transpose => {
            let rank = r.random_range(2..4);
            let s = dims(r, rank);
            (OpKind::Transpose, vec![any(r, &s)])
        }
        OpKind::SumAxis(_) | OpKind::L2Norm(_) => {
            let rank = r.random_range(1..4);
            let s = dims(r, rank);
            let axis = r.random_range(0..rank);
            let kind = match template {
                OpKind::SumAxis(_) => OpKind::SumAxis(axis),
                _ => OpKind::L2Norm(axis),
            };
            (kind, vec![any(r, &s)])
        }
        OpKind::Log => {
            let s = dims(r, 2);
            (OpKind::Log, vec![random_tensor(r, &s, 0.1, 3.0)])
        }
        OpKind::Relu => {
            let s = dims(r, 2);
            (OpKind::Relu, vec![away_from(r, &s, -2.0, 2.0, 0.0, 1e-3)])
        }
        OpKind::ClampMin(floor) => {
            let s = dims(r, 2);
            (template.clone(), vec![away_from(r, &s, -2.0, 2.0, *floor, 1e-3)])
        }
        OpKind::CosineSimilarityMatrix => {
            let (n, m, d) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            (template.clone(), vec![any(r, &[n, d]), any(r, &[m, d])])
        }
        OpKind::Conv1dDepthwise => {
            let (n, c, l, k) = (
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(1..7),
                r.random_range(1..4),
            );
            (
                template.clone(),
                vec![any(r, &[n, c, l]), any(r, &[c, k]), any(r, &[c])],
            )
        }
        OpKind::SelectiveScan => {
            let (n, l, c, s) = (
                r.random_range(1..3),
                r.random_range(1..6),
                r.random_range(1..4),
                r.random_range(1..4),
            );
            let inputs = vec![
                any(r, &[n, l, c]),
                random_tensor(r, &[n, l, c], 0.01, 0.5),
                random_tensor(r, &[c, s], -3.0, -0.1),
                any(r, &[n, l, s]),
                any(r, &[n, l, s]),
                any(r, &[c]),
            ];
            (template.clone(), inputs)
        }
    }
}

/// Worst relative error per op over `trials` random instances.
pub fn primitive_errors(trials: u64) -> Vec<(&'static str, f64)> {
    catalog()
        .iter()
        .map(|template| {
            let worst = (0..trials)
                .map(|t| {
                    let (kind, inputs) = instance(template, 1000 * t + 7);
                    op_gradient_error(&kind, &inputs, t)
                })
                .fold(0.0, f64::max);
            (template.name(), worst)
        })
        .collect()
}

pub fn small_model(fusion: Fusion, head_input: HeadInput) -> TmcnModel {
    let config = ModelConfig {
        view_dims: vec![5, 4],
        hidden: vec![6],
        tmfn: TmfnConfig {
            seq_len: 2,
            token_dim: 3,
            expansion: 2,
            state_size: 3,
            conv_width: 2,
        },
        proj_dim: 4,
        fusion,
        head_input,
        normalize: false,
    };
    TmcnModel::new(config, 11).unwrap()
}

pub fn full_loss(
    model: &TmcnModel,
    batch: &[Tensor],
    s: &Tensor,
    lambda: f64,
) -> (Graph, tmcn_core::Var, tmcn_core::nn::Bound) {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let fw = model.forward(&mut g, &p, batch).unwrap();
    let rec = reconstruction_loss(&mut g, &fw.inputs, &fw.reconstructions).unwrap();
    let (asc, _) = ascl_loss(&mut g, fw.h_hat, &fw.h_views, s, &AsclConfig::default()).unwrap();
    let rec = g.scale(rec, 1.0 / batch[0].rows() as f64).unwrap();
    let asc = g.scale(asc, lambda).unwrap();
    let total = g.add(rec, asc).unwrap();
    (g, total, p)
}

/// Worst relative error over every parameter of a small model
/// (N=4, M=2, l=2, d=3, alpha=2, n=3) with the similarity weights held fixed.
pub fn full_graph_error(fusion: Fusion, head_input: HeadInput) -> f64 {
    let mut model = small_model(fusion, head_input);
    let r = &mut rng(5);
    let batch = vec![random_tensor(r, &[4, 5], 0.0, 1.0), random_tensor(r, &[4, 4], 0.0, 1.0)];
    // the similarity weights are a constant of the step
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let (_, z, _) = model.forward_reconstruction(&mut g, &p, &batch).unwrap();
    let s = average_similarity(&z.iter().map(|&v| view_similarity(g.value(v))).collect::<Vec<_>>()).unwrap();

    let (g, total, p) = full_loss(&model, &batch, &s, 1.0);
    let grads = p.gradients(&g.backward(total).unwrap(), &model.store);
    let ids: Vec<_> = model.store.ids().collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, analytic) in ids.into_iter().zip(grads) {
        for e in 0..analytic.len() {
            let orig = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = orig + h;
            let (g1, t1, _) = full_loss(&model, &batch, &s, 1.0);
            model.store.get_mut(id).data_mut()[e] = orig - h;
            let (g2, t2, _) = full_loss(&model, &batch, &s, 1.0);
            model.store.get_mut(id).data_mut()[e] = orig;
            let numeric = (g1.value(t1).data()[0] - g2.value(t2).data()[0]) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], numeric, 1e-3));
        }
    }
    worst
}

/// Worst relative error of the contrastive loss gradient with respect to the
/// fused and per-view projections (N=4, M=2).
pub fn ascl_gradient_error() -> f64 {
    let r = &mut rng(21);
    let inputs = vec![
        random_tensor(r, &[4, 5], -1.0, 1.0),
        random_tensor(r, &[4, 5], -1.0, 1.0),
        random_tensor(r, &[4, 5], -1.0, 1.0),
    ];
    let s = average_similarity(&[view_similarity(&inputs[1]), view_similarity(&inputs[2])]).unwrap();
    let loss_of = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
        let (l, _) = ascl_loss(&mut g, v[0], &v[1..], &s, &AsclConfig::default()).unwrap();
        (g, l, v)
    };
    let (g, l, vars) = loss_of(&inputs);
    let grads = g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        for e in 0..inputs[k].len() {
            let numeric = central_difference(&inputs, k, e, 1e-6, |xs| {
                let (g, l, _) = loss_of(xs);
                g.value(l).data()[0]
            });
            worst = worst.max(rel_err(grads.get(*v).unwrap().data()[e], numeric, 1e-3));
        }
    }
    worst
}
