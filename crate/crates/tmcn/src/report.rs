//! CSV and JSON artifacts: training history, metrics, embeddings, ablation
//! tables and the run manifest.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tmcn_core::cluster::{MetricTriple, NMI_VARIANT};
use tmcn_core::dataset::MultiViewDataset;
use tmcn_core::train::{AblationTable, TrainHistory};
use tmcn_core::Tensor;

use crate::config::ConfigFile;
use crate::format::{label_bytes, matrix_bytes};

pub const HISTORY_HEADER: [&str; 9] = [
    "epoch",
    "phase",
    "total_loss",
    "rec_loss",
    "ascl_loss",
    "clamp_frac",
    "acc",
    "nmi",
    "pur",
];

fn metric_cells(m: Option<MetricTriple>) -> [String; 3] {
    match m {
        Some(m) => [m.acc.to_string(), m.nmi.to_string(), m.pur.to_string()],
        None => Default::default(),
    }
}

pub fn write_history<W: Write>(out: W, history: &TrainHistory) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for r in &history.records {
        let [acc, nmi, pur] = metric_cells(r.metrics);
        w.write_record([
            r.epoch.to_string(),
            r.phase.as_str().to_string(),
            r.total_loss.to_string(),
            r.rec_loss.to_string(),
            r.ascl_loss.to_string(),
            r.clamp_frac.to_string(),
            acc,
            nmi,
            pur,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Output of `eval`. Metric keys are omitted for unlabeled data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pur: Option<f64>,
    pub k: usize,
    pub seed: u64,
    pub nmi_variant: &'static str,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignments_file: Option<String>,
}

impl MetricsReport {
    pub fn new(metrics: Option<MetricTriple>, k: usize, seed: u64, objective: f64) -> Self {
        Self {
            acc: metrics.map(|m| m.acc),
            nmi: metrics.map(|m| m.nmi),
            pur: metrics.map(|m| m.pur),
            k,
            seed,
            nmi_variant: NMI_VARIANT,
            objective,
            assignments_file: None,
        }
    }
}

/// One row per sample: `label` column present only when labels are given.
pub fn write_embeddings<W: Write>(out: W, embeddings: &Tensor, labels: Option<&[usize]>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = embeddings.row_len();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..embeddings.rows() {
        let mut row: Vec<String> = embeddings.row(i).iter().map(f64::to_string).collect();
        if let Some(l) = labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_assignments<W: Write>(out: W, assignments: &[usize]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "cluster"])?;
    for (i, c) in assignments.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation<W: Write>(out: W, table: &AblationTable) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "acc", "nmi", "pur", "final_loss"])?;
    for r in &table.rows {
        w.write_record([
            r.mode.as_str().to_string(),
            r.metrics.acc.to_string(),
            r.metrics.nmi.to_string(),
            r.metrics.pur.to_string(),
            r.final_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 over the on-disk encoding of every view and the labels.
pub fn fingerprint(dataset: &MultiViewDataset) -> String {
    let mut h = Sha256::new();
    for v in dataset.views() {
        h.update(matrix_bytes(v));
    }
    if let Some(l) = dataset.labels() {
        h.update(label_bytes(l));
    }
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetInfo {
    pub path: String,
    pub name: String,
    pub fingerprint: String,
    pub n_samples: usize,
    pub view_dims: Vec<usize>,
    pub labeled: bool,
}

impl DatasetInfo {
    pub fn new(path: &Path, dataset: &MultiViewDataset) -> Self {
        Self {
            path: path.display().to_string(),
            name: dataset.name.clone(),
            fingerprint: fingerprint(dataset),
            n_samples: dataset.n_samples(),
            view_dims: dataset.view_dims(),
            labeled: dataset.labels().is_some(),
        }
    }
}

/// Written before training starts and never touched afterwards.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub mode: String,
    pub config: ConfigFile,
    pub dataset: DatasetInfo,
    pub outputs: Vec<String>,
}
