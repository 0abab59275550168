use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tmcn::config::{load_train_config, ConfigFile};
use tmcn::report::{self, DatasetInfo, MetricsReport, RunManifest};
use tmcn::sweep::{self, Axis};
use tmcn::{checkpoint, format, threads};
use tmcn_core::dataset::{generate_synthetic, SyntheticSpec};
use tmcn_core::train::{self, cluster_count, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "tmcn", version, about = "Multi-view clustering with selective-scan fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint.tmcn, history.csv and manifest.json.
    Train(TrainArgs),
    /// Cluster a dataset with a trained model and print metrics as JSON.
    Eval(EvalArgs),
    /// Train and evaluate full, no-tmfn and no-ascl with one seed.
    Ablate(RunArgs),
    /// Train and evaluate every point of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Write the fused representation of every sample as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    /// Comma-separated view widths.
    #[arg(long, value_delimiter = ',', default_value = "20,30,25")]
    views: Vec<usize>,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Joint-phase epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated encoder widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig> {
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.epochs {
            c.joint_epochs = v;
        }
        if let Some(v) = self.pretrain_epochs {
            c.pretrain_epochs = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = &self.hidden {
            c.hidden = v.clone();
        }
        if self.clusters.is_some() {
            c.clusters = self.clusters;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; missing fields take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `key=v1,v2,...` with key one of d, alpha, l, n, k_conv, lambda, tau.
    /// Repeat for more axes.
    #[arg(long, required = true)]
    grid: Vec<Axis>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Cluster count; defaults to the config, then the dataset manifest.
    #[arg(long)]
    k: Option<usize>,
    /// k-means seed; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Where to write per-sample assignments. Unlabeled datasets always get
    /// one, next to the checkpoint unless given here.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn effective_config(config: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    overrides.apply(load_train_config(config)?)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_samples: a.samples,
        n_clusters: a.clusters as usize,
        view_dims: a.views.clone(),
        separation: a.separation,
        noise_std: a.noise,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    format::save_dataset(&data, &a.out)?;
    log::info!("wrote {} ({})", a.out.display(), report::fingerprint(&data));
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = effective_config(a.config.as_deref(), &a.overrides)?;
    let data = format::load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("checkpoint.tmcn");
    let hist = a.out.join("history.csv");
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command_line(),
        seed: config.seed,
        mode: config.mode.as_str().into(),
        config: ConfigFile::from_train_config(&config),
        dataset: DatasetInfo::new(&a.data, &data),
        outputs: vec![ckpt.display().to_string(), hist.display().to_string()],
    };
    let mpath = a.out.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", mpath.display()))?;
    log::info!("{}", train::describe(&config));
    let (model, history) = train::train(&config, &data)?;
    checkpoint::save(&ckpt, &model, &config)?;
    report::write_history(output(Some(&hist))?, &history)?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (model, config) = checkpoint::load(&a.checkpoint)?;
    let data = format::load_dataset(&a.data)?;
    if data.view_dims() != model.config.view_dims {
        bail!(
            "dataset views {:?} do not match the checkpoint's {:?}",
            data.view_dims(),
            model.config.view_dims
        );
    }
    let k = match a.k {
        Some(k) => k,
        None => cluster_count(config.clusters, &data)?,
    };
    let seed = a.seed.unwrap_or(config.seed);
    let ev = train::evaluate(&model, &data, k, seed, a.restarts.unwrap_or(config.kmeans_restarts))?;
    let mut rep = MetricsReport::new(ev.metrics, k, seed, ev.clustering.objective);
    let target = match (&a.assignments, data.labels()) {
        (Some(p), _) => Some(p.clone()),
        (None, None) => Some(a.checkpoint.with_file_name("assignments.csv")),
        (None, Some(_)) => None,
    };
    if let Some(p) = target {
        report::write_assignments(output(Some(&p))?, &ev.clustering.assignments)?;
        rep.assignments_file = Some(p.display().to_string());
    }
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(())
}

fn ablate(a: &RunArgs) -> Result<()> {
    let config = effective_config(a.config.as_deref(), &a.overrides)?;
    let data = format::load_dataset(&a.data)?;
    let table = tmcn::run_ablation(&config, &data, threads())?;
    report::write_ablation(output(a.out.as_deref())?, &table)?;
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let config = effective_config(a.run.config.as_deref(), &a.run.overrides)?;
    let data = format::load_dataset(&a.run.data)?;
    let rows = sweep::run_sweep(&config, &data, &a.grid, threads())?;
    log::info!("accuracy spread {}", sweep::acc_spread(&rows));
    sweep::write_sweep(output(a.run.out.as_deref())?, &rows)?;
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let data = format::load_dataset(&a.data)?;
    let h = train::representation(&model, &data)?;
    report::write_embeddings(output(a.out.as_deref())?, &h, data.labels())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ExportEmbeddings(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
