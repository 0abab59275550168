//! The ten acceptance criteria, one PASS/FAIL line each. Exits nonzero if
//! any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use support::gradcheck::{ascl_gradient_error, full_graph_error, primitive_errors};
use support::*;
use tmcn::config::ConfigFile;
use tmcn::sweep::{acc_spread, run_sweep, Axis};
use tmcn_core::ascl::{ascl_loss, AsclConfig, AsclMode};
use tmcn_core::cluster::{accuracy, kmeans, nmi, purity, KMeansConfig};
use tmcn_core::dataset::{generate_synthetic, MultiViewDataset, SyntheticSpec};
use tmcn_core::graph::{forward, Graph, OpKind};
use tmcn_core::model::{Fusion, HeadInput, TmcnModel};
use tmcn_core::train::{
    ablation_row, evaluate, evaluate_representation, smoothed, train, Mode, TrainConfig, TrainHistory,
};
use tmcn_core::Tensor;

const SEED: u64 = 7;
const K: usize = 4;

fn dataset() -> MultiViewDataset {
    generate_synthetic(&SyntheticSpec {
        n_samples: 500,
        n_clusters: K,
        view_dims: vec![20, 30, 25],
        separation: 6.0,
        noise_std: 0.5,
        seed: SEED,
    })
    .unwrap()
}

/// Desk-scale training budget shared by criteria 6, 7, 8 and 10.
fn config() -> TrainConfig {
    TrainConfig {
        hidden: vec![128, 128],
        batch_size: 250,
        pretrain_epochs: 10,
        joint_epochs: 40,
        learning_rate: 3e-4,
        lambda: 1.0,
        tau: 0.5,
        seed: SEED,
        clusters: Some(K),
        ..TrainConfig::default()
    }
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let prims = primitive_errors(20);
    let (worst_op, worst_prim) = prims
        .iter()
        .fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let net = [
        full_graph_error(Fusion::Tmfn, HeadInput::Fused),
        full_graph_error(Fusion::Tmfn, HeadInput::Gated),
        full_graph_error(Fusion::Concat, HeadInput::Fused),
        ascl_gradient_error(),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    let took = start.elapsed();
    check(
        prims.len() == 26 && worst_prim < 1e-5 && net < 1e-4 && took < Duration::from_secs(30),
        format!(
            "{} ops, worst primitive {worst_prim:.2e} ({worst_op}), worst network {net:.2e}, {}",
            prims.len(),
            secs(took)
        ),
    )
}

fn scan_oracle_check() -> Outcome {
    let start = Instant::now();
    let r = &mut rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, l, c, s) = (
            r.random_range(1..3),
            r.random_range(1..=16),
            r.random_range(1..=8),
            r.random_range(1..=4),
        );
        let x = random_tensor(r, &[n, l, c], -1.0, 1.0);
        let delta = random_tensor(r, &[n, l, c], 0.001, 0.5);
        let a = random_tensor(r, &[c, s], -4.0, -0.1);
        let b = random_tensor(r, &[n, l, s], -1.0, 1.0);
        let cm = random_tensor(r, &[n, l, s], -1.0, 1.0);
        let d = random_tensor(r, &[c], -1.0, 1.0);
        let y = forward(&OpKind::SelectiveScan, &[&x, &delta, &a, &b, &cm, &d]).unwrap();
        worst = worst.max(y.max_abs_diff(&scan_oracle(&x, &delta, &a, &b, &cm, &d)));
    }
    let took = start.elapsed();
    check(
        worst < 1e-10 && took < Duration::from_secs(5),
        format!("50 cases, max deviation {worst:.2e}, {}", secs(took)),
    )
}

fn metric_oracles() -> Outcome {
    let r = &mut rng(77);
    let labels = |r: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize| -> Vec<usize> {
        (0..n).map(|_| r.random_range(0..k)).collect()
    };
    let mut acc_mismatch = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=40);
        let truth = labels(r, n, k);
        let pred = labels(r, n, k);
        if accuracy(&pred, &truth).unwrap() != brute_force_accuracy(&pred, &truth, k) {
            acc_mismatch += 1;
        }
        worst = worst
            .max((nmi(&pred, &truth).unwrap() - nmi_oracle(&pred, &truth)).abs())
            .max((purity(&pred, &truth).unwrap() - purity_oracle(&pred, &truth)).abs());
    }
    check(
        acc_mismatch == 0 && worst < 1e-12,
        format!("200 trials, {acc_mismatch} accuracy mismatches, worst nmi/pur deviation {worst:.2e}"),
    )
}

fn kmeans_checks() -> Outcome {
    let r = &mut rng(31);
    let mut runs = 0;
    let mut increases = 0;
    for trial in 0..100 {
        let n = r.random_range(4..80);
        let dim = r.random_range(1..5);
        let data = random_tensor(r, &[n, dim], -5.0, 5.0);
        let k = r.random_range(1..=n.min(8));
        let cfg = KMeansConfig {
            restarts: 1 + trial % 3,
            ..KMeansConfig::new(k, trial as u64)
        };
        let res = kmeans(&data, &cfg).unwrap();
        runs += 1;
        increases += res.objective_trace.windows(2).filter(|w| w[1] > w[0]).count();
    }
    let points = [0.0, 1.0, 10.0, 11.0];
    let oracle = brute_force_two_means(&points);
    let res = kmeans(
        &Tensor::matrix(4, 1, points.to_vec()).unwrap(),
        &KMeansConfig::new(2, 0),
    )
    .unwrap();
    let mut centers = res.centers.data().to_vec();
    centers.sort_by(f64::total_cmp);
    check(
        increases == 0 && oracle == (0.5, 10.5) && centers == [oracle.0, oracle.1],
        format!("{runs} runs with {increases} objective increases, two-means centers {centers:?}"),
    )
}

fn ascl_closed_form() -> Outcome {
    let eye = Tensor::identity(2);
    let eval = |mode: AsclMode| {
        let mut g = Graph::new();
        let f = g.constant(eye.clone());
        let v = g.constant(eye.clone());
        let cfg = AsclConfig {
            temperature: 1.0,
            mode,
            denominator_floor: 1e-8,
        };
        let (loss, stats) = ascl_loss(&mut g, f, &[v], &eye, &cfg).unwrap();
        (g.value(loss).item().unwrap(), stats.fraction())
    };
    let (oracle, _) = ascl_oracle(&rows(&eye), &[rows(&eye)], &rows(&eye), 1.0, true, 1e-8);
    let (got, _) = eval(AsclMode::SelfExcluded);
    let (_, literal_frac) = eval(AsclMode::Literal);
    check(
        (oracle + 0.5).abs() < 1e-15 && (got - oracle).abs() < 1e-9 && literal_frac == 1.0,
        format!("self-excluded loss {got}, oracle {oracle}, literal clamp_frac {literal_frac}"),
    )
}

fn descent(history: &TrainHistory, took: Duration) -> Outcome {
    let joint: Vec<f64> = history.joint().map(|r| r.total_loss).collect();
    let s = smoothed(&joint, 5);
    let rises: Vec<usize> = (5..s.len()).filter(|&t| s[t] > s[t - 1]).collect();
    check(
        !joint.is_empty() && rises.is_empty() && took < Duration::from_secs(300),
        format!(
            "{} joint epochs, smoothed loss {:.4} -> {:.4}, rises at {rises:?}, {}",
            joint.len(),
            s.first().copied().unwrap_or(f64::NAN),
            s.last().copied().unwrap_or(f64::NAN),
            secs(took)
        ),
    )
}

fn ablation(full_acc: f64, data: &MultiViewDataset) -> Outcome {
    let no_tmfn = ablation_row(&config(), data, Mode::NoTmfn).unwrap().metrics.acc;
    let no_ascl = ablation_row(&config(), data, Mode::NoAscl).unwrap().metrics.acc;
    check(
        full_acc >= 0.95 && full_acc >= no_tmfn && full_acc >= no_ascl,
        format!("acc full {full_acc:.4}, no-tmfn {no_tmfn:.4}, no-ascl {no_ascl:.4}"),
    )
}

fn baseline(full_acc: f64, data: &MultiViewDataset) -> Outcome {
    let cfg = config();
    let raw = evaluate_representation(&data.concatenated(), data.labels(), K, cfg.seed, cfg.kmeans_restarts)
        .unwrap()
        .metrics
        .unwrap()
        .acc;
    check(
        full_acc >= raw,
        format!("acc full {full_acc:.4}, k-means on raw concatenated views {raw:.4}"),
    )
}

fn determinism(data: &MultiViewDataset) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    tmcn::format::save_dataset(data, &dir.path().join("data")).unwrap();
    // a shorter schedule: the property is about the code path, not the budget
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        joint_epochs: 5,
        eval_every: 2,
        ..config()
    };
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, ConfigFile::from_train_config(&cfg).to_toml()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_tmcn"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(dir.path().join("data"))
            .arg("--out")
            .arg(&out)
            .env("TMCN_THREADS", "1")
            .status()
            .unwrap();
        assert!(status.success(), "train exited with {status}");
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        (read("history.csv"), read("checkpoint.tmcn"))
    };
    let (h1, c1) = run("a");
    let (h2, c2) = run("b");
    check(
        h1 == h2 && c1 == c2,
        format!(
            "history.csv {} bytes {}, checkpoint.tmcn {} bytes {}",
            h1.len(),
            if h1 == h2 { "identical" } else { "differ" },
            c1.len(),
            if c1 == c2 { "identical" } else { "differ" }
        ),
    )
}

fn sweep(data: &MultiViewDataset) -> Outcome {
    let start = Instant::now();
    let axes: Vec<Axis> = ["d=4,16,64,128", "alpha=2,4,8,12"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let rows = run_sweep(&config(), data, &axes, tmcn::threads()).unwrap();
    let spread = acc_spread(&rows);
    let accs: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.metrics.acc)).collect();
    check(
        rows.len() == 16 && spread < 0.15,
        format!(
            "{} points, acc spread {spread:.4} [{}], {}",
            rows.len(),
            accs.join(" "),
            secs(start.elapsed())
        ),
    )
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail})");
            }
        }
    }
}

fn main() {
    let mut report = Report { failures: 0 };
    report.run(1, "gradient suite", gradients);
    report.run(2, "scan oracle", scan_oracle_check);
    report.run(3, "metric oracles", metric_oracles);
    report.run(4, "k-means", kmeans_checks);
    report.run(5, "contrastive closed form", ascl_closed_form);

    let data = dataset();
    let trained: Option<(TmcnModel, TrainHistory, Duration)> = catch_unwind(|| {
        let start = Instant::now();
        let (model, history) = train(&config(), &data).unwrap();
        (model, history, start.elapsed())
    })
    .ok();
    let full_acc = trained.as_ref().map(|(m, _, _)| {
        evaluate(m, &data, K, SEED, config().kmeans_restarts)
            .unwrap()
            .metrics
            .unwrap()
            .acc
    });
    let need = |v: Option<f64>| v.ok_or_else(|| "full training failed".to_string());

    report.run(6, "end-to-end descent", || match &trained {
        Some((_, h, took)) => descent(h, *took),
        None => Err("full training failed".into()),
    });
    report.run(7, "clustering quality and ablation", || {
        ablation(need(full_acc)?, &data)
    });
    report.run(8, "baseline dominance", || baseline(need(full_acc)?, &data));
    report.run(9, "determinism", || determinism(&data));
    report.run(10, "sweep flatness", || sweep(&data));

    println!("acceptance: {} of 10 criteria passed", 10 - report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
