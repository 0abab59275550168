//! Two-phase training (reconstruction pretraining, then joint
//! reconstruction + contrastive), evaluation and the ablation protocol.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ascl::{ascl_loss, average_similarity, view_similarity, AsclConfig, AsclMode, ClampStats};
use crate::autoencoder::reconstruction_loss;
use crate::cluster::{kmeans, ClusteringResult, KMeansConfig, MetricTriple};
use crate::dataset::{normalize_views, MultiViewDataset};
use crate::error::{Error, TensorError};
use crate::graph::Graph;
use crate::model::{Fusion, HeadInput, ModelConfig, TmcnModel};
use crate::nn::Adam;
use crate::tensor::Tensor;
use crate::tmfn::TmfnConfig;

/// Which parts of the objective and network are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Full,
    /// Concatenated view embeddings replace the fusion network.
    NoTmfn,
    /// The contrastive term is dropped (`lambda = 0`).
    NoAscl,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoTmfn, Mode::NoAscl];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoTmfn => "no-tmfn",
            Mode::NoAscl => "no-ascl",
        }
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "full" => Ok(Mode::Full),
            "no-tmfn" | "no_tmfn" => Ok(Mode::NoTmfn),
            "no-ascl" | "no_ascl" => Ok(Mode::NoAscl),
            other => Err(Error::Config(alloc::format!("unknown mode {other:?}"))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub seq_len: usize,
    pub token_dim: usize,
    pub expansion: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub proj_dim: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub ascl_mode: AsclMode,
    pub denominator_floor: f64,
    /// Number of clusters; taken from the dataset when `None`.
    pub clusters: Option<usize>,
    pub kmeans_restarts: usize,
    /// Compute metrics every this many epochs (0 disables).
    pub eval_every: usize,
    pub head_input: HeadInput,
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TmfnConfig::default();
        Self {
            lambda: 1.0,
            tau: 0.5,
            seq_len: t.seq_len,
            token_dim: t.token_dim,
            expansion: t.expansion,
            state_size: t.state_size,
            conv_width: t.conv_width,
            proj_dim: 128,
            hidden: vec![500, 500, 2000],
            learning_rate: 3e-4,
            batch_size: 256,
            pretrain_epochs: 100,
            joint_epochs: 100,
            seed: 0,
            mode: Mode::Full,
            ascl_mode: AsclMode::SelfExcluded,
            denominator_floor: 1e-8,
            clusters: None,
            kmeans_restarts: 10,
            eval_every: 0,
            head_input: HeadInput::Fused,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(alloc::format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be >= 1".into()));
        }
        self.ascl().validate()
    }

    pub fn tmfn(&self) -> TmfnConfig {
        TmfnConfig {
            seq_len: self.seq_len,
            token_dim: self.token_dim,
            expansion: self.expansion,
            state_size: self.state_size,
            conv_width: self.conv_width,
        }
    }

    pub fn ascl(&self) -> AsclConfig {
        AsclConfig {
            temperature: self.tau,
            mode: self.ascl_mode,
            denominator_floor: self.denominator_floor,
        }
    }

    /// `lambda`, or 0 in the no-contrastive ablation.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::NoAscl => 0.0,
            _ => self.lambda,
        }
    }

    pub fn model_config(&self, view_dims: &[usize]) -> ModelConfig {
        ModelConfig {
            view_dims: view_dims.to_vec(),
            hidden: self.hidden.clone(),
            tmfn: self.tmfn(),
            proj_dim: self.proj_dim,
            fusion: match self.mode {
                Mode::NoTmfn => Fusion::Concat,
                _ => Fusion::Tmfn,
            },
            head_input: self.head_input,
            normalize: self.normalize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

/// Per-epoch averages over mini-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over batches of `rec_loss + lambda * ascl_loss`.
    pub total_loss: f64,
    /// Mean over batches of the batch reconstruction sum divided by batch size.
    pub rec_loss: f64,
    /// Mean over batches of the raw (summed) batch reconstruction error.
    pub rec_loss_sum: f64,
    pub ascl_loss: f64,
    pub clamp_frac: f64,
    pub metrics: Option<MetricTriple>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn joint(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Joint)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Trailing moving average; entry `t` averages `values[t+1-window ..= t]`
/// (fewer at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            values[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

/// Mini-batches of a fresh permutation; a trailing batch of one sample is
/// merged into the previous batch.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn prepared(dataset: &MultiViewDataset, normalize: bool) -> MultiViewDataset {
    if normalize {
        normalize_views(dataset)
    } else {
        dataset.clone()
    }
}

/// Trains a fresh model on `dataset`.
///
/// Parameters are rounded to `f32` precision at the end so that a model
/// written to and read back from a checkpoint evaluates identically.
pub fn train(config: &TrainConfig, dataset: &MultiViewDataset) -> Result<(TmcnModel, TrainHistory), Error> {
    config.validate()?;
    let data = prepared(dataset, config.normalize);
    let n = data.n_samples();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut model = TmcnModel::new(config.model_config(&data.view_dims()), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut opt = Adam::new(&model.store, config.learning_rate);
    let lambda = config.effective_lambda();
    let ascl_cfg = config.ascl();
    let eval_k = match (config.eval_every, data.labels()) {
        (0, _) | (_, None) => None,
        _ => Some(cluster_count(config.clusters, &data)?),
    };
    let mut history = TrainHistory::default();
    let phases = [
        (Phase::Pretrain, config.pretrain_epochs),
        (Phase::Joint, config.joint_epochs),
    ];
    let mut epoch = 0;
    for (phase, epochs) in phases {
        for _ in 0..epochs {
            let mut sums = [0.0f64; 4];
            let mut clamp = ClampStats::default();
            let plan = batches(n, config.batch_size, &mut rng);
            for idx in &plan {
                let batch = data.batch(idx);
                let b = idx.len() as f64;
                let mut g = Graph::new();
                let p = model.store.bind(&mut g, true);
                let (rec, asc, total) = if phase == Phase::Pretrain || lambda == 0.0 {
                    let (inputs, _, recons) = model.forward_reconstruction(&mut g, &p, &batch)?;
                    let rec = reconstruction_loss(&mut g, &inputs, &recons)?;
                    let total = g.scale(rec, 1.0 / b)?;
                    (rec, None, total)
                } else {
                    let fw = model.forward(&mut g, &p, &batch).map_err(|e| match e {
                        Error::Tensor(TensorError::NonFiniteScan { step, sample, channel }) => {
                            log::error!("scan blew up at step {step} (sample {sample}, channel {channel})");
                            Error::Diverged {
                                epoch,
                                phase: phase.as_str(),
                                term: "selective_scan",
                            }
                        }
                        e => e,
                    })?;
                    let rec = reconstruction_loss(&mut g, &fw.inputs, &fw.reconstructions)?;
                    let per_view: Vec<Tensor> = fw.embeddings.iter().map(|&z| view_similarity(g.value(z))).collect();
                    let s = average_similarity(&per_view)?;
                    debug_assert!(crate::ascl::check_similarity(&s));
                    let (asc, stats) = ascl_loss(&mut g, fw.h_hat, &fw.h_views, &s, &ascl_cfg)?;
                    clamp.merge(stats);
                    let rec_mean = g.scale(rec, 1.0 / b)?;
                    let weighted = g.scale(asc, lambda)?;
                    let total = g.add(rec_mean, weighted)?;
                    (rec, Some(asc), total)
                };
                let rec_v = g.value(rec).data()[0];
                let asc_v = asc.map_or(0.0, |a| g.value(a).data()[0]);
                let total_v = g.value(total).data()[0];
                if !rec_v.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        phase: phase.as_str(),
                        term: "rec_loss",
                    });
                }
                if !asc_v.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        phase: phase.as_str(),
                        term: "ascl_loss",
                    });
                }
                if asc.is_some() {
                    debug_assert_eq!(total_v, rec_v * (1.0 / b) + asc_v * lambda);
                } else {
                    debug_assert_eq!(total_v, rec_v * (1.0 / b));
                }
                let grads = g.backward(total)?;
                let grads = p.gradients(&grads, &model.store);
                opt.step(&mut model.store, &grads);
                sums[0] += total_v;
                sums[1] += rec_v / b;
                sums[2] += rec_v;
                sums[3] += asc_v;
            }
            let nb = plan.len() as f64;
            let metrics = match eval_k {
                Some(k) if (epoch + 1) % config.eval_every == 0 => {
                    let (_, h) = model.represent(data.views(), 256)?;
                    let ev =
                        evaluate_representation(&h.unit_rows(), data.labels(), k, config.seed, config.kmeans_restarts)?;
                    ev.metrics
                }
                _ => None,
            };
            let record = EpochRecord {
                epoch,
                phase,
                total_loss: sums[0] / nb,
                rec_loss: sums[1] / nb,
                rec_loss_sum: sums[2] / nb,
                ascl_loss: sums[3] / nb,
                clamp_frac: clamp.fraction(),
                metrics,
            };
            log::info!(
                "epoch {epoch} [{}] total={:.6} rec={:.6} ascl={:.6}",
                phase.as_str(),
                record.total_loss,
                record.rec_loss,
                record.ascl_loss
            );
            history.records.push(record);
            epoch += 1;
        }
    }
    model.store.round_to_f32();
    Ok((model, history))
}

/// Clustering of a representation and, when labels are known, its metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub clustering: ClusteringResult,
    pub metrics: Option<MetricTriple>,
    pub k: usize,
    pub seed: u64,
}

/// k-means on the rows of `representation`, scored against `labels`.
pub fn evaluate_representation(
    representation: &Tensor,
    labels: Option<&[usize]>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Evaluation, Error> {
    let cfg = KMeansConfig {
        restarts,
        ..KMeansConfig::new(k, seed)
    };
    let clustering = kmeans(representation, &cfg)?;
    let metrics = labels
        .map(|l| MetricTriple::compute(&clustering.assignments, l))
        .transpose()?;
    Ok(Evaluation {
        clustering,
        metrics,
        k,
        seed,
    })
}

/// Projected fused representation of every sample.
pub fn representation(model: &TmcnModel, dataset: &MultiViewDataset) -> Result<Tensor, Error> {
    let data = prepared(dataset, model.config.normalize);
    Ok(model.represent(data.views(), 256)?.1)
}

/// Forward pass to the projected fused representation, then k-means and
/// (if the dataset is labeled) metrics.
///
/// The contrastive loss only constrains directions, so rows are scaled to
/// unit length before clustering.
pub fn evaluate(
    model: &TmcnModel,
    dataset: &MultiViewDataset,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Evaluation, Error> {
    let h = representation(model, dataset)?.unit_rows();
    evaluate_representation(&h, dataset.labels(), k, seed, restarts)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub metrics: MetricTriple,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Trains and evaluates `full`, `no-tmfn` and `no-ascl` with a shared seed.
pub fn run_ablation(config: &TrainConfig, dataset: &MultiViewDataset) -> Result<AblationTable, Error> {
    let rows = Mode::ALL
        .iter()
        .map(|&mode| ablation_row(config, dataset, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AblationTable { rows })
}

/// One ablation run: `config` with `mode` substituted, trained then
/// evaluated.
pub fn ablation_row(config: &TrainConfig, dataset: &MultiViewDataset, mode: Mode) -> Result<AblationRow, Error> {
    if dataset.labels().is_none() {
        return Err(Error::Dataset("ablation needs a labeled dataset".into()));
    }
    let k = cluster_count(config.clusters, dataset)?;
    let cfg = TrainConfig { mode, ..config.clone() };
    let (model, history) = train(&cfg, dataset)?;
    let ev = evaluate(&model, dataset, k, cfg.seed, cfg.kmeans_restarts)?;
    Ok(AblationRow {
        mode,
        metrics: ev.metrics.expect("labeled dataset"),
        final_loss: history.last().map_or(0.0, |r| r.total_loss),
    })
}

/// Cluster count from the config, else from the dataset.
pub fn cluster_count(config_k: Option<usize>, dataset: &MultiViewDataset) -> Result<usize, Error> {
    config_k
        .or(dataset.n_clusters())
        .ok_or_else(|| Error::Config("number of clusters unknown: set `clusters`".into()))
}

/// Human-readable one-line summary of a config, for logs.
pub fn describe(config: &TrainConfig) -> String {
    alloc::format!(
        "mode={} lambda={} tau={} l={} d={} alpha={} n={} k_conv={} proj={} lr={} batch={} epochs={}+{} seed={}",
        config.mode.as_str(),
        config.lambda,
        config.tau,
        config.seq_len,
        config.token_dim,
        config.expansion,
        config.state_size,
        config.conv_width,
        config.proj_dim,
        config.learning_rate,
        config.batch_size,
        config.pretrain_epochs,
        config.joint_epochs,
        config.seed
    )
}
