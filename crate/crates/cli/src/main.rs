use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use sentrycam::audit::AlertConfig;
use sentrycam::ingest::{
    read_snapshot, scan_dir, snapshot_file_name, synth_trajectory, write_snapshot, Scenario, SynthConfig,
};
use sentrycam::metrics::NearestCentroid;
use sentrycam::pipeline::{self, AuditSpace, PipelineConfig};
use sentrycam::plot::{decision_map, scatter_svg, Bounds, PlotOptions};
use sentrycam::projection::{load_model, EpochEmbedding, TrainConfig};
use sentrycam::theory::{equivalence_check, sample_manifold, tipping_curve, tipping_train_config, ManifoldKind};
use sentrycam::{Error, Result};

/// Exit status when the run finished but at least one health alert fired.
const EXIT_ALERT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sentrycam",
    version,
    about = "Live projection and geometric auditing of training snapshots"
)]
struct Cli {
    /// Seed for every random choice; falls back to SENTRYCAM_SEED, then 0.
    #[arg(long, global = true, env = "SENTRYCAM_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic snapshot trajectory.
    Synth(SynthArgs),
    /// Project and audit every snapshot in a directory.
    Run(RunArgs),
    /// Fidelity metrics of a finished run.
    Eval(EvalArgs),
    /// Recompute the health series and alerts of a finished run.
    Audit(AuditArgs),
    /// Sampling-ratio sweep: relative density and preservation.
    Tipping(TippingArgs),
    /// Covering radius against mean k-NN distance across sample sizes.
    Equivalence(EquivalenceArgs),
    /// Render one embedding file as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "stable")]
    scenario: Scenario,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Required for the collapse scenario.
    #[arg(long)]
    collapse_epoch: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Projection training epochs per snapshot.
    #[arg(long, default_value_t = 20)]
    vis_epochs: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Upper bound on batches per projection epoch; 0 means no cap.
    #[arg(long, default_value_t = 12)]
    max_batches: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.vis_epochs,
            negatives: self.negatives,
            batch_size: self.batch_size,
            max_batches_per_epoch: (self.max_batches > 0).then_some(self.max_batches),
            lr: self.lr,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct AlertArgs {
    /// Consecutive unhealthy deltas needed for an alert.
    #[arg(long, default_value_t = 2)]
    alert_k: usize,
    /// Margin in units of the recent standard deviation.
    #[arg(long, default_value_t = 0.25)]
    alert_alpha: f64,
    #[arg(long, default_value_t = 10)]
    alert_window: usize,
    #[arg(long, default_value_t = 0.5)]
    smoothing: f64,
    /// Points the health metrics are computed on: embedding or activations.
    #[arg(long, default_value = "embedding")]
    audit_space: AuditSpace,
}

impl AlertArgs {
    fn config(&self) -> AlertConfig {
        AlertConfig {
            k: self.alert_k,
            alpha: self.alert_alpha,
            window: self.alert_window,
            smoothing: self.smoothing,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep polling the input directory for new snapshots.
    #[arg(long)]
    watch: bool,
    /// Stop watching after this many seconds without a new snapshot.
    #[arg(long)]
    idle_timeout: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    poll_interval: f64,
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[arg(long, default_value_t = 0.8)]
    eta_th: f64,
    #[arg(long, default_value_t = 0.01)]
    precision: f64,
    #[arg(long, default_value_t = 3)]
    sampling_repeats: usize,
    /// Recompute the sampling ratio every N epochs.
    #[arg(long, default_value_t = 1)]
    refit_every: usize,
    /// Temporal edges kept per node.
    #[arg(long, default_value_t = 5)]
    temporal_cap: usize,
    /// Train every projection from scratch.
    #[arg(long)]
    no_warm_start: bool,
    /// Learning-rate multiplier when fine-tuning the previous epoch's model.
    #[arg(long, default_value_t = 0.03)]
    warm_lr_scale: f64,
    #[arg(long)]
    no_plots: bool,
    #[arg(long)]
    decision_map: bool,
    #[arg(long)]
    no_models: bool,
    #[arg(long)]
    save_graphs: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    alert: AlertArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 15)]
    k: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Where the health CSV and alerts go; defaults to `<output>/audit`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    alert: AlertArgs,
}

#[derive(Args)]
struct TippingArgs {
    #[arg(long, default_value = "clusters")]
    kind: ManifoldKind,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.25,0.1,0.05,0.02,0.01")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 15)]
    k: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Projection epochs at ratio 1; smaller ratios get proportionally more.
    #[arg(long, default_value_t = 20)]
    vis_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[arg(long, default_value = "circle")]
    kind: ManifoldKind,
    #[arg(long, value_delimiter = ',', default_value = "100,200,500,1000,2000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 15)]
    k: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Embedding JSONL written by `run`.
    #[arg(long)]
    embedding: PathBuf,
    /// Snapshot providing the labels used for colors.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Model checkpoint; with --decision-map the background is decoded through it.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    decision_map: bool,
    #[arg(long, default_value_t = 80)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

fn cmd_synth(args: SynthArgs, seed: u64) -> Result<bool> {
    let mut cfg = SynthConfig::new(
        args.scenario,
        args.epochs,
        args.n_per_class,
        args.classes,
        args.dim,
        seed,
    );
    cfg.collapse_epoch = args.collapse_epoch;
    fs::create_dir_all(&args.out).map_err(|e| Error::io_at(&args.out, e))?;
    for snap in synth_trajectory(&cfg)? {
        write_snapshot(&snap, &args.out.join(snapshot_file_name(snap.epoch)))?;
    }
    let manifest = scan_dir(&args.out)?;
    write_file(&args.out.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    println!("wrote {} snapshots to {}", manifest.entries.len(), args.out.display());
    Ok(false)
}

fn cmd_run(args: RunArgs, seed: u64) -> Result<bool> {
    let cfg = PipelineConfig {
        k: args.k,
        eta_th: args.eta_th,
        precision: args.precision,
        sampling_repeats: args.sampling_repeats,
        refit_every: args.refit_every,
        temporal_cap: args.temporal_cap,
        train: args.train.config(),
        seed,
        warm_start: !args.no_warm_start,
        warm_lr_scale: args.warm_lr_scale,
        plots: !args.no_plots,
        decision_map: args.decision_map,
        save_models: !args.no_models,
        save_graphs: args.save_graphs,
        alert: args.alert.config(),
        audit_space: args.alert.audit_space,
        watch: args.watch,
        poll_interval: Duration::from_secs_f64(args.poll_interval.max(0.01)),
        idle_timeout: args.idle_timeout.map(Duration::from_secs_f64),
        ..PipelineConfig::new(&args.input, &args.output)
    };
    let summary = pipeline::run(cfg)?;
    let avt = summary.timings.iter().map(|t| t.avt_s).sum::<f64>() / summary.timings.len().max(1) as f64;
    println!(
        "processed {} epochs ({} failed), mean AVT {:.2}s, {} alerts",
        summary.processed.len(),
        summary.failed.len(),
        avt,
        summary.alerts.len()
    );
    for a in &summary.alerts {
        println!("alert: {} {} at epoch {}", a.metric, a.direction, a.epoch);
    }
    if summary.processed.is_empty() {
        return Err(Error::InvalidArgument("no epoch was processed".into()));
    }
    Ok(summary.alert_fired())
}

fn cmd_eval(args: EvalArgs) -> Result<bool> {
    let report = pipeline::evaluate_run(&args.input, &args.output, args.k)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&args.output.join("metrics.csv"), &csv)?;
    write_file(&args.output.join("metrics.json"), report.to_json()?.as_bytes())?;
    print!("{}", String::from_utf8_lossy(&csv));
    if let Some(m) = report.interslice_mean {
        println!("interslice mean spearman: {m:.4}");
    }
    Ok(false)
}

fn cmd_audit(args: AuditArgs) -> Result<bool> {
    let summary = pipeline::audit_dir(&args.input, &args.output, &args.alert.config(), args.alert.audit_space)?;
    let dir = args.report.unwrap_or_else(|| args.output.join("audit"));
    pipeline::write_audit(&summary, &dir)?;
    for a in &summary.alerts {
        println!("alert: {} {} at epoch {}", a.metric, a.direction, a.epoch);
    }
    if let Some(region) = &summary.ideal_region {
        println!(
            "ideal region: inter >= {:.4}, intra <= {:.4}",
            region.min_inter_cluster_distance, region.max_intra_cluster_variance
        );
    }
    Ok(summary.any_alert())
}

fn cmd_tipping(args: TippingArgs, seed: u64) -> Result<bool> {
    let sample = sample_manifold(args.kind, args.n, args.dim, args.noise, seed)?;
    let train_cfg = TrainConfig {
        epochs: args.vis_epochs,
        lr: args.lr,
        ..tipping_train_config(seed)
    };
    let curve = tipping_curve(sample.points.view(), &args.ratios, args.k, seed, &train_cfg)?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            println!("knee at ratio {}", curve.knee);
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(false)
}

fn cmd_equivalence(args: EquivalenceArgs, seed: u64) -> Result<bool> {
    let seeds: Vec<u64> = (0..args.seeds).map(|s| seed.wrapping_add(s)).collect();
    let report = equivalence_check(args.kind, &args.sizes, args.k, &seeds)?;
    println!("n,seed,covering_radius,dbar_k,ratio");
    for r in &report.rows {
        println!("{},{},{},{},{}", r.n, r.seed, r.covering_radius, r.dbar_k, r.ratio);
    }
    println!("spread {:.4}", report.spread);
    Ok(false)
}

fn cmd_plot(args: PlotArgs) -> Result<bool> {
    let emb = EpochEmbedding::read_jsonl_file(&args.embedding)?;
    let snap = args.snapshot.as_deref().map(read_snapshot).transpose()?;
    let labels = snap.as_ref().and_then(|s| s.labels());
    let background = if args.decision_map {
        let (Some(snap), Some(model_path)) = (&snap, &args.model) else {
            return Err(Error::InvalidArgument(
                "--decision-map needs --snapshot and --model".into(),
            ));
        };
        let labels = snap
            .labels()
            .ok_or_else(|| Error::InvalidArgument("snapshot has no labels".into()))?;
        let model = load_model(model_path)?.model;
        let high = snap.to_f64();
        let predictor = NearestCentroid::fit(high.view(), labels)?;
        Some(decision_map(
            &model,
            &predictor,
            Bounds::of(emb.coords.view())?,
            args.resolution,
        )?)
    } else {
        None
    };
    let opts = PlotOptions {
        title: args.title,
        ..PlotOptions::default()
    };
    let svg = scatter_svg(emb.coords.view(), labels, &opts, background.as_ref())?;
    write_file(&args.out, svg.as_bytes())?;
    Ok(false)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Run(a) => cmd_run(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Tipping(a) => cmd_tipping(a, seed),
        Command::Equivalence(a) => cmd_equivalence(a, seed),
        Command::Plot(a) => cmd_plot(a),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_ALERT),
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
