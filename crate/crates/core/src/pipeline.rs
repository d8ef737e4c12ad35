//! End-to-end per-epoch processing of a snapshot directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::audit::{nearest_centroid_error, standardize, AlertConfig, AlertRecord, AuditSummary, Auditor};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphParams};
use crate::ingest::{scan_dir, snapshot_file_name, RepresentationSnapshot, SnapshotManifest};
use crate::memory::assemble;
use crate::metrics::{
    interslice_correlation, intraslice_preservation, mean, reconstruction_accuracy, FidelityReport, FidelityRow,
    NearestCentroid,
};
use crate::plot::{decision_map, scatter_svg, Bounds, PlotOptions};
use crate::projection::{
    load_model, model_file_name, save_model, train, Autoencoder, EpochEmbedding, Init, ModelCheckpoint, TrainConfig,
};
use crate::sampling::{optimal_sampling_ratio, SearchParams};

/// Which points the health metrics are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditSpace {
    /// The 2-D embedding of the current slice, standardized per epoch.
    Embedding,
    /// The raw activations of the current slice.
    Activations,
}

impl FromStr for AuditSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" => Ok(Self::Embedding),
            "activations" => Ok(Self::Activations),
            other => Err(Error::InvalidArgument(format!("unknown audit space {other:?}"))),
        }
    }
}

impl fmt::Display for AuditSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Embedding => "embedding",
            Self::Activations => "activations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub k: usize,
    pub eta_th: f64,
    pub precision: f64,
    pub sampling_repeats: usize,
    /// Recompute the sampling ratio every this many processed epochs.
    pub refit_every: usize,
    pub temporal_cap: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub warm_start: bool,
    /// Learning-rate multiplier for warm-started epochs.
    pub warm_lr_scale: f64,
    pub plots: bool,
    pub decision_map: bool,
    pub save_models: bool,
    pub save_graphs: bool,
    pub alert: AlertConfig,
    pub audit_space: AuditSpace,
    pub watch: bool,
    pub poll_interval: Duration,
    /// Watch mode stops after this long without a new snapshot.
    pub idle_timeout: Option<Duration>,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
            k: 15,
            eta_th: 0.8,
            precision: 0.01,
            sampling_repeats: 3,
            refit_every: 1,
            temporal_cap: 5,
            train: TrainConfig::default(),
            seed: 0,
            warm_start: true,
            warm_lr_scale: 0.03,
            plots: true,
            decision_map: false,
            save_models: true,
            save_graphs: false,
            alert: AlertConfig::default(),
            audit_space: AuditSpace::Embedding,
            watch: false,
            poll_interval: Duration::from_secs(1),
            idle_timeout: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.sampling_repeats == 0 || self.refit_every == 0 {
            return Err(Error::InvalidArgument(
                "k, sampling repeats and refit interval must be positive".into(),
            ));
        }
        if !(self.warm_lr_scale > 0.0 && self.warm_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("warm_lr_scale must be positive".into()));
        }
        if !(self.eta_th > 0.0 && self.eta_th <= 1.0) || !(self.precision > 0.0 && self.precision < 1.0) {
            return Err(Error::InvalidArgument(
                "eta_th must be in (0, 1] and precision in (0, 1)".into(),
            ));
        }
        self.train.validate()?;
        self.alert.validate()
    }
}

pub const EMBEDDING_DIR: &str = "embeddings";
pub const PLOT_DIR: &str = "plots";
pub const MODEL_DIR: &str = "models";
pub const GRAPH_DIR: &str = "graphs";
pub const HEALTH_FILE: &str = "health.csv";
pub const ALERTS_FILE: &str = "alerts.jsonl";
pub const TIMING_FILE: &str = "timing.csv";
pub const ATT_HINT_FILE: &str = "att.txt";

pub fn embedding_file_name(epoch: u32) -> String {
    format!("epoch_{epoch:06}.jsonl")
}

pub fn plot_file_name(epoch: u32) -> String {
    format!("epoch_{epoch:06}.svg")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTiming {
    pub epoch: u32,
    pub nodes: usize,
    pub edges: usize,
    pub sample_ratio: f64,
    pub sampling_s: f64,
    pub graph_s: f64,
    pub train_s: f64,
    /// Wall-clock visualization time for the epoch.
    pub avt_s: f64,
    pub att_s: Option<f64>,
    pub finished_unix_s: f64,
}

impl EpochTiming {
    const HEADER: &'static str =
        "epoch,nodes,edges,sample_ratio,sampling_s,graph_s,train_s,avt_s,att_s,avt_over_att,finished_unix_s";

    fn csv_row(&self) -> String {
        let att = self.att_s.map(|v| v.to_string()).unwrap_or_default();
        let ratio = self
            .att_s
            .filter(|a| *a > 0.0)
            .map(|a| (self.avt_s / a).to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.3}",
            self.epoch,
            self.nodes,
            self.edges,
            self.sample_ratio,
            self.sampling_s,
            self.graph_s,
            self.train_s,
            self.avt_s,
            att,
            ratio,
            self.finished_unix_s
        )
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub processed: Vec<u32>,
    pub failed: Vec<(u32, String)>,
    pub alerts: Vec<AlertRecord>,
    pub timings: Vec<EpochTiming>,
    pub audit: Option<AuditSummary>,
}

impl RunSummary {
    pub fn alert_fired(&self) -> bool {
        !self.alerts.is_empty()
    }
}

fn read_att_hint(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join(ATT_HINT_FILE)).ok()?;
    text.trim().parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0)
}

fn mix(seed: u64, epoch: u32) -> u64 {
    seed ^ (u64::from(epoch) + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io_at(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io_at(path, e))
}

/// Stateful driver: owns the warm-start model, the auditor and the output files.
pub struct Pipeline {
    cfg: PipelineConfig,
    done: BTreeSet<u32>,
    model: Option<Autoencoder>,
    ratio: Option<f64>,
    since_refit: usize,
    auditor: Auditor,
    summary: RunSummary,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        create_dir(&cfg.output)?;
        create_dir(&cfg.output.join(EMBEDDING_DIR))?;
        if cfg.plots {
            create_dir(&cfg.output.join(PLOT_DIR))?;
        }
        if cfg.save_models {
            create_dir(&cfg.output.join(MODEL_DIR))?;
        }
        if cfg.save_graphs {
            create_dir(&cfg.output.join(GRAPH_DIR))?;
        }
        // Fresh run: truncate the append-only outputs.
        File::create(cfg.output.join(ALERTS_FILE)).map_err(|e| Error::io_at(cfg.output.join(ALERTS_FILE), e))?;
        let timing = cfg.output.join(TIMING_FILE);
        fs::write(&timing, format!("{}\n", EpochTiming::HEADER)).map_err(|e| Error::io_at(&timing, e))?;
        let auditor = Auditor::new(cfg.alert)?;
        Ok(Self {
            cfg,
            done: BTreeSet::new(),
            model: None,
            ratio: None,
            since_refit: 0,
            auditor,
            summary: RunSummary::default(),
        })
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    /// Processes every snapshot not yet seen, in epoch order. Returns the
    /// number of epochs attempted.
    pub fn poll(&mut self) -> Result<usize> {
        let manifest = scan_dir(&self.cfg.input)?;
        let pending: Vec<u32> = manifest
            .epochs()
            .into_iter()
            .filter(|e| !self.done.contains(e))
            .collect();
        for &epoch in &pending {
            self.done.insert(epoch);
            match self.process(&manifest, epoch) {
                Ok(t) => {
                    log::info!(
                        "epoch {epoch}: ratio {:.3}, {} nodes, {} edges, {:.2}s",
                        t.sample_ratio,
                        t.nodes,
                        t.edges,
                        t.avt_s
                    );
                    self.summary.processed.push(epoch);
                    self.summary.timings.push(t);
                }
                Err(e) => {
                    log::error!("epoch {epoch} skipped: {e}");
                    self.summary.failed.push((epoch, e.to_string()));
                }
            }
        }
        Ok(pending.len())
    }

    fn process(&mut self, manifest: &SnapshotManifest, epoch: u32) -> Result<EpochTiming> {
        let start = Instant::now();
        let memory = assemble(manifest.load(epoch)?, manifest)?;
        let current = memory.current.to_f64();

        let t0 = Instant::now();
        let refit = self.ratio.is_none() || self.since_refit >= self.cfg.refit_every;
        if refit {
            let params = SearchParams {
                k: self.cfg.k,
                eta_th: self.cfg.eta_th,
                precision: self.cfg.precision,
                repeats: self.cfg.sampling_repeats,
                seed: mix(self.cfg.seed, epoch),
            };
            let found = optimal_sampling_ratio(current.view(), &params)?;
            if found.fallback {
                log::warn!(
                    "epoch {epoch}: no ratio reached eta_th {}; using all points",
                    self.cfg.eta_th
                );
            }
            self.ratio = Some(found.optimal_ratio);
            self.since_refit = 0;
        }
        self.since_refit += 1;
        let ratio = self.ratio.expect("ratio set above");
        let sampling_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let graph = build_graph(
            &memory,
            &GraphParams {
                k: self.cfg.k,
                sample_ratio: ratio,
                per_node_cap: self.cfg.temporal_cap,
                seed: mix(self.cfg.seed, epoch),
            },
        )?;
        let graph_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let mut train_cfg = TrainConfig {
            seed: mix(self.cfg.train.seed ^ self.cfg.seed, epoch),
            ..self.cfg.train.clone()
        };
        let init = match (&self.model, self.cfg.warm_start) {
            (Some(prev), true) => {
                train_cfg.lr *= self.cfg.warm_lr_scale;
                Init::Warm(prev)
            }
            _ => Init::Fresh,
        };
        let out = train(&graph, init, &train_cfg)?;
        let train_s = t2.elapsed().as_secs_f64();

        let embedding = EpochEmbedding::of_slice(&out.model, current.view(), epoch)?;
        self.emit(epoch, &memory.current, &current, &embedding, &out.model)?;
        if self.cfg.save_graphs {
            let path = self.cfg.output.join(GRAPH_DIR).join(format!("epoch_{epoch:06}.jsonl"));
            let mut buf = Vec::new();
            graph.write_jsonl(&mut buf)?;
            write_atomic(&path, &buf)?;
        }
        self.audit(epoch, &memory.current, &current, &embedding)?;
        self.model = Some(out.model);

        let timing = EpochTiming {
            epoch,
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            sample_ratio: ratio,
            sampling_s,
            graph_s,
            train_s,
            avt_s: start.elapsed().as_secs_f64(),
            att_s: read_att_hint(&self.cfg.input),
            finished_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        };
        let path = self.cfg.output.join(TIMING_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io_at(&path, e))?;
        writeln!(f, "{}", timing.csv_row())?;
        Ok(timing)
    }

    fn emit(
        &self,
        epoch: u32,
        snap: &RepresentationSnapshot,
        current: &Array2<f64>,
        embedding: &EpochEmbedding,
        model: &Autoencoder,
    ) -> Result<()> {
        let mut buf = Vec::new();
        embedding.write_jsonl(&mut buf)?;
        write_atomic(
            &self.cfg.output.join(EMBEDDING_DIR).join(embedding_file_name(epoch)),
            &buf,
        )?;
        if self.cfg.plots {
            let background = match (self.cfg.decision_map, snap.labels()) {
                (true, Some(labels)) => {
                    let predictor = NearestCentroid::fit(current.view(), labels)?;
                    Some(decision_map(
                        model,
                        &predictor,
                        Bounds::of(embedding.coords.view())?,
                        80,
                    )?)
                }
                _ => None,
            };
            let opts = PlotOptions {
                title: Some(format!("epoch {epoch}")),
                ..PlotOptions::default()
            };
            let svg = scatter_svg(embedding.coords.view(), snap.labels(), &opts, background.as_ref())?;
            write_atomic(
                &self.cfg.output.join(PLOT_DIR).join(plot_file_name(epoch)),
                svg.as_bytes(),
            )?;
        }
        if self.cfg.save_models {
            let ckpt = ModelCheckpoint {
                epoch,
                curve: self.cfg.train.curve,
                model: model.clone(),
            };
            save_model(&ckpt, &self.cfg.output.join(MODEL_DIR).join(model_file_name(epoch)))?;
        }
        Ok(())
    }

    fn audit(
        &mut self,
        epoch: u32,
        snap: &RepresentationSnapshot,
        current: &Array2<f64>,
        embedding: &EpochEmbedding,
    ) -> Result<()> {
        let Some(labels) = snap.labels() else {
            log::warn!("epoch {epoch}: snapshot has no labels; health metrics skipped");
            return Ok(());
        };
        let points = match self.cfg.audit_space {
            AuditSpace::Embedding => standardize(embedding.coords.view()),
            AuditSpace::Activations => current.clone(),
        };
        let loss = nearest_centroid_error(current.view(), labels)?;
        let fired = self.auditor.push(epoch, points.view(), labels, Some(loss))?;
        if !fired.is_empty() {
            let path = self.cfg.output.join(ALERTS_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io_at(&path, e))?;
            for a in &fired {
                log::warn!(
                    "alert: {} {} at epoch {} (delta {:.4}, margin {:.4})",
                    a.metric,
                    a.direction,
                    a.epoch,
                    a.delta,
                    a.margin
                );
                serde_json::to_writer(&mut f, a)?;
                f.write_all(b"\n")?;
            }
            self.summary.alerts.extend(fired);
        }
        let mut buf = Vec::new();
        self.auditor.series().write_csv(&mut buf)?;
        write_atomic(&self.cfg.output.join(HEALTH_FILE), &buf)?;
        self.summary.audit = Some(self.auditor.summary());
        Ok(())
    }
}

/// Runs the pipeline once over the directory, or keeps polling in watch mode.
pub fn run(cfg: PipelineConfig) -> Result<RunSummary> {
    let watch = cfg.watch;
    let poll_interval = cfg.poll_interval;
    let idle_timeout = cfg.idle_timeout;
    let mut pipeline = Pipeline::new(cfg)?;
    if !watch {
        let attempted = pipeline.poll()?;
        if attempted == 0 {
            return Err(Error::InvalidArgument(format!(
                "no snapshots found in {}",
                pipeline.cfg.input.display()
            )));
        }
        return Ok(pipeline.summary.clone());
    }
    let mut last_activity = Instant::now();
    loop {
        match pipeline.poll() {
            Ok(0) => {}
            Ok(_) => last_activity = Instant::now(),
            Err(e) => log::error!("scan failed: {e}"),
        }
        if idle_timeout.is_some_and(|t| last_activity.elapsed() >= t) {
            log::info!("no new snapshots for {:?}; stopping", idle_timeout.unwrap());
            break;
        }
        thread::sleep(poll_interval);
    }
    Ok(pipeline.summary.clone())
}

/// Snapshot of `epoch` plus the current-slice embedding written by a run.
fn load_pair(input: &Path, output: &Path, epoch: u32) -> Result<(RepresentationSnapshot, EpochEmbedding)> {
    let snap = crate::ingest::read_snapshot(&input.join(snapshot_file_name(epoch)))?;
    let emb = EpochEmbedding::read_jsonl_file(&output.join(EMBEDDING_DIR).join(embedding_file_name(epoch)))?;
    if emb.len() != snap.n() {
        return Err(Error::Shape(format!(
            "epoch {epoch}: {} embedded points for {} samples",
            emb.len(),
            snap.n()
        )));
    }
    Ok((snap, emb))
}

/// Epochs for which a run wrote an embedding and the snapshot still exists.
pub fn evaluated_epochs(input: &Path, output: &Path) -> Result<Vec<u32>> {
    let manifest = scan_dir(input)?;
    Ok(manifest
        .epochs()
        .into_iter()
        .filter(|&e| output.join(EMBEDDING_DIR).join(embedding_file_name(e)).exists())
        .collect())
}

/// Fidelity metrics for a finished run.
pub fn evaluate_run(input: &Path, output: &Path, k: usize) -> Result<FidelityReport> {
    let epochs = evaluated_epochs(input, output)?;
    if epochs.is_empty() {
        return Err(Error::InvalidArgument("no embedded epochs to evaluate".into()));
    }
    let mut report = FidelityReport {
        k,
        ..FidelityReport::default()
    };
    let mut highs = Vec::new();
    let mut lows = Vec::new();
    for &epoch in &epochs {
        let (snap, emb) = load_pair(input, output, epoch)?;
        let high = snap.to_f64();
        let p = intraslice_preservation(high.view(), emb.coords.view(), k)?;
        let model_path = output.join(MODEL_DIR).join(model_file_name(epoch));
        let accuracy = match (snap.labels(), model_path.exists()) {
            (Some(labels), true) => {
                let model = load_model(&model_path)?.model;
                let recon = model.decode(model.encode(high.view())?.view())?;
                let predictor = NearestCentroid::fit(high.view(), labels)?;
                Some(reconstruction_accuracy(high.view(), recon.view(), &predictor)?)
            }
            _ => None,
        };
        report.epochs.push(FidelityRow {
            epoch,
            preservation: p.fraction,
            preservation_count: p.mean_count,
            reconstruction_accuracy: accuracy,
        });
        highs.push(high);
        lows.push(emb.coords);
    }
    if highs.len() >= 3 && highs.iter().all(|h| h.nrows() == highs[0].nrows()) {
        let hv: Vec<ArrayView2<'_, f64>> = highs.iter().map(|m| m.view()).collect();
        let lv: Vec<ArrayView2<'_, f64>> = lows.iter().map(|m| m.view()).collect();
        report.interslice = interslice_correlation(&hv, &lv, None)?;
        report.interslice_mean = Some(mean(&report.interslice));
    }
    Ok(report)
}

/// Re-audits a finished run from its embeddings (or the raw activations).
pub fn audit_dir(input: &Path, output: &Path, cfg: &AlertConfig, space: AuditSpace) -> Result<AuditSummary> {
    let epochs = evaluated_epochs(input, output)?;
    let mut auditor = Auditor::new(*cfg)?;
    for epoch in epochs {
        let (snap, emb) = load_pair(input, output, epoch)?;
        let labels = snap
            .labels()
            .ok_or_else(|| Error::InvalidArgument(format!("epoch {epoch}: snapshot has no labels")))?;
        let high = snap.to_f64();
        let loss = nearest_centroid_error(high.view(), labels)?;
        let points = match space {
            AuditSpace::Embedding => standardize(emb.coords.view()),
            AuditSpace::Activations => high.clone(),
        };
        auditor.push(epoch, points.view(), labels, Some(loss))?;
    }
    if auditor.series().epochs.len() < 2 {
        return Err(Error::InvalidArgument("audit needs at least two epochs".into()));
    }
    Ok(auditor.summary())
}

/// Writes the health CSV and alerts JSONL of an audit summary.
pub fn write_audit(summary: &AuditSummary, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut health = Vec::new();
    summary.series.write_csv(&mut health)?;
    write_atomic(&dir.join(HEALTH_FILE), &health)?;
    let mut alerts = BufWriter::new(Vec::new());
    for a in &summary.alerts {
        serde_json::to_writer(&mut alerts, a)?;
        alerts.write_all(b"\n")?;
    }
    let bytes = alerts.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(ALERTS_FILE), &bytes)
}
