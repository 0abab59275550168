//! Grid sweeps over fusion hyperparameters.

use std::io::Write;

use tmcn_core::cluster::MetricTriple;
use tmcn_core::dataset::MultiViewDataset;
use tmcn_core::train::{cluster_count, evaluate, train, TrainConfig};

use crate::parallel_map;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("grid axis {0:?} is not of the form key=v1,v2,...")]
    Syntax(String),
    #[error("unknown grid key {0:?} (expected one of d, alpha, l, n, k_conv, lambda, tau)")]
    Key(String),
    #[error("grid key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("grid key {0:?} given twice")]
    Duplicate(String),
    #[error("token_dim {d} does not divide the embedding width {width}")]
    Width { d: usize, width: usize },
}

const KEYS: [&str; 7] = ["d", "alpha", "l", "n", "k_conv", "lambda", "tau"];

/// One axis of a sweep, e.g. `d=4,16,64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = GridError;
    fn from_str(s: &str) -> Result<Self, GridError> {
        let (key, vals) = s.split_once('=').ok_or_else(|| GridError::Syntax(s.into()))?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(GridError::Key(key));
        }
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(GridError::Syntax(s.into()));
        }
        Ok(Self { key, values })
    }
}

/// Every combination of the axes, first axis outermost.
pub fn points(axes: &[Axis]) -> Result<Vec<Vec<(String, String)>>, GridError> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].iter().any(|b| b.key == a.key) {
            return Err(GridError::Duplicate(a.key.clone()));
        }
    }
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, GridError> {
    value.parse().map_err(|_| GridError::Value {
        key: key.into(),
        value: value.into(),
    })
}

/// `base` with one grid point applied. Changing `d` without `l` keeps the
/// embedding width `l * d` fixed by adjusting `l`.
pub fn apply_point(base: &TrainConfig, point: &[(String, String)]) -> Result<TrainConfig, GridError> {
    let mut c = base.clone();
    let width = base.seq_len * base.token_dim;
    let has_l = point.iter().any(|(k, _)| k == "l");
    for (k, v) in point {
        match k.as_str() {
            "d" => {
                let d: usize = parse(k, v)?;
                if d == 0 || (!has_l && !width.is_multiple_of(d)) {
                    return Err(GridError::Width { d, width });
                }
                c.token_dim = d;
                if !has_l {
                    c.seq_len = width / d;
                }
            }
            "alpha" => c.expansion = parse(k, v)?,
            "l" => c.seq_len = parse(k, v)?,
            "n" => c.state_size = parse(k, v)?,
            "k_conv" => c.conv_width = parse(k, v)?,
            "lambda" => c.lambda = parse(k, v)?,
            "tau" => c.tau = parse(k, v)?,
            other => return Err(GridError::Key(other.into())),
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: Vec<(String, String)>,
    pub config: TrainConfig,
    pub metrics: MetricTriple,
    pub final_loss: f64,
}

/// Trains and evaluates every grid point with the base seed, `threads`
/// points at a time. Rows come back in grid order.
pub fn run_sweep(
    base: &TrainConfig,
    dataset: &MultiViewDataset,
    axes: &[Axis],
    threads: usize,
) -> anyhow::Result<Vec<SweepRow>> {
    if dataset.labels().is_none() {
        anyhow::bail!("a sweep needs a labeled dataset");
    }
    let k = cluster_count(base.clusters, dataset)?;
    let jobs = points(axes)?
        .into_iter()
        .map(|p| apply_point(base, &p).map(|c| (p, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let results = parallel_map(&jobs, threads, |(point, config)| -> anyhow::Result<SweepRow> {
        log::info!("sweep point {point:?}");
        let (model, history) = train(config, dataset)?;
        let ev = evaluate(&model, dataset, k, config.seed, config.kmeans_restarts)?;
        Ok(SweepRow {
            point: point.clone(),
            config: config.clone(),
            metrics: ev.metrics.expect("labeled dataset"),
            final_loss: history.last().map_or(0.0, |r| r.total_loss),
        })
    });
    results.into_iter().collect()
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let keys: Vec<String> = rows
        .first()
        .map_or(Vec::new(), |r| r.point.iter().map(|(k, _)| k.clone()).collect());
    let mut header = keys.clone();
    header.extend(["seq_len", "token_dim", "expansion", "acc", "nmi", "pur", "final_loss"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.point.iter().map(|(_, v)| v.clone()).collect();
        rec.extend([
            r.config.seq_len.to_string(),
            r.config.token_dim.to_string(),
            r.config.expansion.to_string(),
            r.metrics.acc.to_string(),
            r.metrics.nmi.to_string(),
            r.metrics.pur.to_string(),
            r.final_loss.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Largest minus smallest accuracy over the rows.
pub fn acc_spread(rows: &[SweepRow]) -> f64 {
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.metrics.acc), hi.max(r.metrics.acc))
    });
    if rows.is_empty() {
        0.0
    } else {
        hi - lo
    }
}
