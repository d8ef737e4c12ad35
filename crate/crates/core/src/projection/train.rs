use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::curve::EmbeddingCurve;
use super::layers::Mode;
use super::loss::{batch_recon_loss, umap_edge_loss};
use super::network::{init_model, Autoencoder, DEFAULT_MAX_GROUPS};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::graph::{GraphNode, SpatioTemporalGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier on `lr` for encoder parameters only.
    pub encoder_lr_scale: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    /// Visualization-training epochs.
    pub epochs: usize,
    /// Positive edges per batch.
    pub batch_size: usize,
    pub negatives: usize,
    pub lambda_recon: f64,
    /// Upper bound on batches per epoch; `None` runs `ceil(edges / batch_size)`.
    pub max_batches_per_epoch: Option<usize>,
    pub max_groups: usize,
    pub curve: EmbeddingCurve,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            encoder_lr_scale: 1.0,
            weight_decay: 1e-5,
            step_size: 4,
            gamma: 0.1,
            epochs: 20,
            batch_size: 256,
            negatives: 5,
            lambda_recon: 1.0,
            max_batches_per_epoch: Some(12),
            max_groups: DEFAULT_MAX_GROUPS,
            curve: EmbeddingCurve::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.encoder_lr_scale, self.gamma, self.curve.a, self.curve.b]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive
            || self.weight_decay < 0.0
            || self.step_size == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.negatives == 0
            || self.max_groups == 0
            || self.max_batches_per_epoch == Some(0)
            || !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite())
        {
            return Err(Error::InvalidArgument(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// Starting point of a training run.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Fresh,
    Warm(&'a Autoencoder),
}

/// 2-D coordinates of a set of nodes and the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochEmbedding {
    pub coords: Array2<f64>,
    pub nodes: Vec<GraphNode>,
    pub model_id: u64,
}

impl EpochEmbedding {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Embeds every row of `points` (one slice) with `model` in eval mode.
    pub fn of_slice(model: &Autoencoder, points: ArrayView2<'_, f64>, epoch: u32) -> Result<Self> {
        let coords = model.encode(points)?;
        let nodes = (0..points.nrows() as u32)
            .map(|g| GraphNode { epoch, global_index: g })
            .collect();
        Ok(Self {
            coords,
            nodes,
            model_id: model_id(model),
        })
    }

    /// Rows belonging to `epoch`.
    pub fn epoch_rows(&self, epoch: u32) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&r| self.nodes[r].epoch == epoch)
            .collect()
    }

    /// JSON lines `{global_index, epoch, x, y}` in node order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            global_index: u32,
            epoch: u32,
            x: f64,
            y: f64,
        }
        for (node, c) in self.nodes.iter().zip(self.coords.rows()) {
            serde_json::to_writer(
                &mut out,
                &Line {
                    global_index: node.global_index,
                    epoch: node.epoch,
                    x: c[0],
                    y: c[1],
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl EpochEmbedding {
    /// Parses JSON lines written by [`EpochEmbedding::write_jsonl`]; the model
    /// id is not part of the format and reads back as 0.
    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            global_index: u32,
            epoch: u32,
            x: f64,
            y: f64,
        }
        let mut nodes = Vec::new();
        let mut flat = Vec::new();
        for (no, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("embedding line {}: {e}", no + 1)))?;
            if !(l.x.is_finite() && l.y.is_finite()) {
                return Err(Error::NonFinite { row: no, col: 0 });
            }
            nodes.push(GraphNode {
                epoch: l.epoch,
                global_index: l.global_index,
            });
            flat.extend([l.x, l.y]);
        }
        let coords = Array2::from_shape_vec((nodes.len(), 2), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            coords,
            nodes,
            model_id: 0,
        })
    }

    pub fn read_jsonl_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// FNV-1a over the bit patterns of all trainable tensors.
pub fn model_id(model: &Autoencoder) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in model.tensors() {
        for v in t {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub batches_per_epoch: usize,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    /// Mean loss over the last visualization epoch.
    pub final_loss: f64,
    pub seconds: f64,
}

pub struct TrainOutput {
    pub model: Autoencoder,
    pub embedding: EpochEmbedding,
    pub report: TrainReport,
}

struct Batch {
    heads: Vec<usize>,
    tails: Vec<usize>,
    weights: Vec<f64>,
    pool: Vec<usize>,
    /// Indices into `pool`, `negatives` per positive.
    negatives: Vec<usize>,
}

fn draw_batch<R: Rng>(
    rng: &mut R,
    edges: &[(usize, usize, f64, bool)],
    sampler: &WeightedIndex<f64>,
    size: usize,
    nodes: usize,
    negatives: usize,
) -> Batch {
    let mut heads = Vec::with_capacity(size);
    let mut tails = Vec::with_capacity(size);
    let mut weights = Vec::with_capacity(size);
    for _ in 0..size {
        let (i, j, w, spatial) = edges[sampler.sample(rng)];
        if spatial && rng.random_bool(0.5) {
            heads.push(j);
            tails.push(i);
        } else {
            heads.push(i);
            tails.push(j);
        }
        weights.push(w);
    }
    let pool = (0..size).map(|_| rng.random_range(0..nodes)).collect();
    let negatives = (0..size * negatives).map(|_| rng.random_range(0..size)).collect();
    Batch {
        heads,
        tails,
        weights,
        pool,
        negatives,
    }
}

/// One forward/backward pass; gradients are accumulated into `grad`.
/// Returns `(umap, recon)` batch losses.
pub(crate) fn batch_step(
    model: &mut Autoencoder,
    grad: &mut Autoencoder,
    points: ArrayView2<'_, f64>,
    batch: &BatchRef<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let b = batch.heads.len();
    let rows: Vec<usize> = batch
        .heads
        .iter()
        .chain(batch.tails)
        .chain(batch.pool)
        .copied()
        .collect();
    let x = points.select(Axis(0), &rows);
    let (y, enc_cache) = model.encoder.forward(x.view(), Mode::Train)?;

    let mut dy = Array2::<f64>::zeros(y.dim());
    let at = |r: usize| [y[[r, 0]], y[[r, 1]]];
    let scale = 1.0 / b as f64;
    let mut umap = 0.0;
    let mut negs = Vec::with_capacity(cfg.negatives);
    for p in 0..b {
        negs.clear();
        let picks = &batch.negatives[p * cfg.negatives..(p + 1) * cfg.negatives];
        negs.extend(picks.iter().map(|&q| at(2 * b + q)));
        let l = umap_edge_loss(at(p), at(b + p), batch.weights[p], &cfg.curve, &negs);
        umap += l.loss * scale;
        for c in 0..2 {
            dy[[p, c]] += l.grad_i[c] * scale;
            dy[[b + p, c]] += l.grad_j[c] * scale;
            for (g, &q) in l.grad_negatives.iter().zip(picks) {
                dy[[2 * b + q, c]] += g[c] * scale;
            }
        }
    }

    let mut recon = 0.0;
    if cfg.lambda_recon > 0.0 {
        let y_heads = y.slice(s![..b, ..]);
        let (x_hat, dec_cache) = model.decoder.forward(y_heads, Mode::Train)?;
        let (l, dxh) = batch_recon_loss(x.slice(s![..b, ..]), x_hat.view());
        recon = l;
        let dxh = dxh * cfg.lambda_recon;
        let dy_heads = model.decoder.backward(&dec_cache, dxh.view(), &mut grad.decoder);
        dy.slice_mut(s![..b, ..]).scaled_add(1.0, &dy_heads);
    }
    model.encoder.backward(&enc_cache, dy.view(), &mut grad.encoder);
    Ok((umap, recon))
}

/// One training batch as row indices into the point matrix.
#[derive(Debug, Clone, Copy)]
pub struct BatchRef<'a> {
    pub heads: &'a [usize],
    pub tails: &'a [usize],
    /// Membership weight of each positive edge.
    pub weights: &'a [f64],
    /// Candidate negatives, shared by the whole batch.
    pub pool: &'a [usize],
    /// `negatives` entries per positive edge, indexing into `pool`.
    pub negatives: &'a [usize],
}

impl BatchRef<'_> {
    fn validate(&self, n: usize, negatives: usize) -> Result<()> {
        let b = self.heads.len();
        if b < 2 || self.tails.len() != b || self.weights.len() != b || self.negatives.len() != b * negatives {
            return Err(Error::Shape(format!(
                "batch of {b} heads needs matching tails and weights and {negatives} negatives each"
            )));
        }
        if self.heads.iter().chain(self.tails).chain(self.pool).any(|&i| i >= n)
            || self.negatives.iter().any(|&q| q >= self.pool.len())
        {
            return Err(Error::InvalidArgument("batch index out of range".into()));
        }
        Ok(())
    }
}

/// Total batch loss `umap + lambda_recon * recon` and its gradient with
/// respect to every parameter. Batch-norm layers run in train mode on a copy
/// of the model, so `model` is left untouched.
pub fn batch_gradient(
    model: &Autoencoder,
    points: ArrayView2<'_, f64>,
    batch: &BatchRef<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, Autoencoder)> {
    batch.validate(points.nrows(), cfg.negatives)?;
    if points.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: points.ncols(),
        });
    }
    let mut work = model.clone();
    let mut grad = model.zeros_like();
    let (umap, recon) = batch_step(&mut work, &mut grad, points, batch, cfg)?;
    Ok((umap + cfg.lambda_recon * recon, grad))
}

fn zero(grad: &mut Autoencoder) {
    for t in grad.tensors_mut() {
        t.fill(0.0);
    }
}

/// Fits the autoencoder to `graph` and embeds every graph node.
pub fn train(graph: &SpatioTemporalGraph, init: Init<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if graph.node_count() == 0 {
        return Err(Error::InvalidArgument("graph has no nodes".into()));
    }
    let start = Instant::now();
    let d = graph.points.ncols();
    let mut model = match init {
        Init::Fresh => init_model(d, cfg.max_groups, cfg.seed)?,
        Init::Warm(prev) => {
            if prev.input_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: prev.input_dim(),
                    found: d,
                });
            }
            prev.clone()
        }
    };

    let edges: Vec<(usize, usize, f64, bool)> = graph
        .spatial_edges
        .iter()
        .map(|e| (e.i, e.j, e.w, true))
        .chain(graph.temporal_edges.iter().map(|e| (e.i, e.j, e.w, false)))
        .filter(|e| e.2 > 0.0)
        .collect();

    let mut losses = Vec::new();
    let mut batches_per_epoch = 0;
    let mut final_loss = 0.0;
    if !edges.is_empty() {
        let sampler = WeightedIndex::new(edges.iter().map(|e| e.2))
            .map_err(|e| Error::InvalidArgument(format!("edge weights: {e}")))?;
        let size = cfg.batch_size.min(edges.len()).max(2);
        batches_per_epoch = edges.len().div_ceil(size);
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches_per_epoch = batches_per_epoch.min(cap);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        let mut opt = AdamW::new(&model, cfg.lr, cfg.weight_decay);
        opt.set_encoder_scale(&model, cfg.encoder_lr_scale);
        let mut grad = model.zeros_like();
        let points = graph.points.view();
        for epoch in 0..cfg.epochs {
            opt.lr = cfg.lr_at(epoch);
            let mut epoch_sum = 0.0;
            for _ in 0..batches_per_epoch {
                let batch = draw_batch(&mut rng, &edges, &sampler, size, graph.node_count(), cfg.negatives);
                zero(&mut grad);
                let (umap, recon) = batch_step(
                    &mut model,
                    &mut grad,
                    points,
                    &BatchRef {
                        heads: &batch.heads,
                        tails: &batch.tails,
                        weights: &batch.weights,
                        pool: &batch.pool,
                        negatives: &batch.negatives,
                    },
                    cfg,
                )?;
                let loss = umap + cfg.lambda_recon * recon;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step: losses.len(),
                        detail: format!("umap loss {umap}, reconstruction loss {recon}"),
                    });
                }
                opt.step(&mut model, &grad);
                if !model.is_finite() {
                    return Err(Error::Divergence {
                        step: losses.len(),
                        detail: "non-finite parameters after update".into(),
                    });
                }
                losses.push(loss);
                epoch_sum += loss;
            }
            final_loss = epoch_sum / batches_per_epoch as f64;
        }
    }

    let coords = model.encode(graph.points.view())?;
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: losses.len(),
            detail: "non-finite embedding".into(),
        });
    }
    let embedding = EpochEmbedding {
        coords,
        nodes: graph.nodes.clone(),
        model_id: model_id(&model),
    };
    let report = TrainReport {
        steps: losses.len(),
        batches_per_epoch,
        losses,
        final_loss,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutput {
        model,
        embedding,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn two_clusters(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i % 2) as u32;
            labels.push(c);
            for j in 0..d {
                let centre = if c == 0 { 0.0 } else { 3.0 };
                let noise: f64 = rng.sample(StandardNormal);
                x[[i, j]] = centre + noise;
            }
        }
        (x, labels)
    }

    fn silhouette(y: ArrayView2<'_, f64>, labels: &[u32]) -> f64 {
        let n = y.nrows();
        let dist = |a: usize, b: usize| ((y[[a, 0]] - y[[b, 0]]).powi(2) + (y[[a, 1]] - y[[b, 1]]).powi(2)).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let (mut same, mut ns, mut other, mut no) = (0.0, 0usize, 0.0, 0usize);
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    same += dist(i, j);
                    ns += 1;
                } else {
                    other += dist(i, j);
                    no += 1;
                }
            }
            let a = same / ns as f64;
            let b = other / no as f64;
            total += (b - a) / a.max(b).max(1e-300);
        }
        total / n as f64
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 64,
            max_batches_per_epoch: Some(8),
            seed,
            ..TrainConfig::default()
        }
    }

    fn graph_of(x: Array2<f64>) -> SpatioTemporalGraph {
        let n = x.nrows() as u32;
        SpatioTemporalGraph::spatial_only(x, 0, (0..n).collect(), 10).unwrap()
    }

    #[test]
    fn single_node_graph_returns_initial_model() {
        let x = Array2::<f64>::from_elem((1, 32), 0.5);
        let graph = SpatioTemporalGraph {
            points: x,
            nodes: vec![GraphNode {
                epoch: 3,
                global_index: 0,
            }],
            current_count: 1,
            spatial_edges: vec![],
            temporal_edges: vec![],
            knn_k: 15,
        };
        let cfg = small_cfg(4);
        let out = train(&graph, Init::Fresh, &cfg).unwrap();
        assert_eq!(out.model, init_model(32, cfg.max_groups, 4).unwrap());
        assert_eq!(out.embedding.coords.dim(), (1, 2));
        assert_eq!(out.report.steps, 0);
    }

    #[test]
    fn beats_random_projection_on_two_clusters() {
        let (x, labels) = two_clusters(200, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let proj = Array2::from_shape_fn((64, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let baseline = silhouette(x.dot(&proj).view(), &labels);
        let out = train(&graph_of(x), Init::Fresh, &small_cfg(2)).unwrap();
        let trained = silhouette(out.embedding.coords.view(), &labels);
        assert!(trained > baseline, "trained {trained} baseline {baseline}");
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, _) = two_clusters(120, 32, 3);
        let g = graph_of(x);
        let a = train(&g, Init::Fresh, &small_cfg(7)).unwrap();
        let b = train(&g, Init::Fresh, &small_cfg(7)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.report.losses, b.report.losses);
    }

    #[test]
    fn loss_decreases() {
        let (x, _) = two_clusters(300, 64, 5);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 64,
            max_batches_per_epoch: Some(10),
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&graph_of(x), Init::Fresh, &cfg).unwrap();
        let l = &out.report.losses;
        let tenth = (l.len() / 10).max(1);
        let median = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&l[l.len() - tenth..]) < median(&l[..tenth]));
    }

    #[test]
    fn warm_start_is_not_worse_than_fresh() {
        let (x, _) = two_clusters(200, 64, 8);
        let g = graph_of(x);
        let mut wins = 0;
        for seed in 0..4 {
            let prev = train(&g, Init::Fresh, &small_cfg(100 + seed)).unwrap();
            let warm = train(&g, Init::Warm(&prev.model), &small_cfg(seed)).unwrap();
            let fresh = train(&g, Init::Fresh, &small_cfg(seed)).unwrap();
            if warm.report.final_loss <= fresh.report.final_loss {
                wins += 1;
            }
        }
        assert!(wins >= 3, "warm start won {wins}/4");
    }

    #[test]
    fn embedding_jsonl_lines() {
        let (x, _) = two_clusters(40, 32, 0);
        let out = train(&graph_of(x), Init::Fresh, &small_cfg(0)).unwrap();
        let mut buf = Vec::new();
        out.embedding.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 40);
        let back = EpochEmbedding::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.coords, out.embedding.coords);
        assert_eq!(back.nodes, out.embedding.nodes);
        let v: serde_json::Value = serde_json::from_str(text.lines().nth(3).unwrap()).unwrap();
        assert_eq!(v["global_index"], 3);
        assert_eq!(v["epoch"], 0);
        assert!(v["x"].is_f64() && v["y"].is_f64());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            lambda_recon: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
