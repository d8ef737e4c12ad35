//! Spatio-temporal graph: fuzzy k-NN edges inside the current slice plus
//! cosine-weighted edges from the current slice to its working-memory history.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::WorkingMemory;
use crate::neighbors::{knn, Knn, Metric};
use crate::par;
use crate::sampling::{gather, random_sample};

const SIGMA_ITERATIONS: usize = 64;
const SIGMA_TOLERANCE: f64 = 1e-5;
const SIGMA_CLAMP: (f64, f64) = (1e-3, 1e3);
const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalScale {
    pub rho: f64,
    pub sigma: f64,
}

/// Fits the per-point bandwidth so that
/// `sum_j exp(-max(0, d_j - rho) / sigma) = target` (default `log2(k)`).
///
/// Bisection runs for at most 64 iterations or until the residual is below
/// 1e-5, and the result is clamped to `[1e-3, 1e3] * mean(d)`. When every
/// distance equals `rho` the sum no longer depends on sigma and the widest
/// bandwidth is used; when no finite sigma reaches the target the narrowest is.
pub fn calibrate_local_scale(distances: &[f64], target: Option<f64>) -> LocalScale {
    assert!(!distances.is_empty(), "need at least one neighbor distance");
    let k = distances.len();
    let target = target.unwrap_or_else(|| (k as f64).log2());
    let rho = distances[0];
    let mean = distances.iter().sum::<f64>() / k as f64;
    let lo_clamp = (SIGMA_CLAMP.0 * mean).max(MIN_SIGMA);
    let hi_clamp = (SIGMA_CLAMP.1 * mean).max(MIN_SIGMA);

    let at_rho = distances.iter().filter(|&&d| d - rho <= 0.0).count();
    if at_rho == k {
        return LocalScale { rho, sigma: hi_clamp };
    }
    // Neighbors at rho contribute 1 each for every sigma, so the sum can only
    // approach the target from above as sigma shrinks.
    if at_rho as f64 >= target {
        return LocalScale { rho, sigma: lo_clamp };
    }

    let mass = |sigma: f64| -> f64 { distances.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum() };
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..SIGMA_ITERATIONS {
        let psum = mass(mid);
        if (psum - target).abs() < SIGMA_TOLERANCE {
            break;
        }
        if psum > target {
            hi = mid;
            mid = 0.5 * (lo + hi);
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
        }
    }
    LocalScale {
        rho,
        sigma: mid.clamp(lo_clamp, hi_clamp),
    }
}

/// Directed membership `exp(-max(0, d - rho) / sigma)`.
pub fn directed_weight(d: f64, scale: &LocalScale) -> f64 {
    (-(d - scale.rho).max(0.0) / scale.sigma).exp()
}

/// Probabilistic t-conorm `a + b - a b`.
pub fn symmetrize(a: f64, b: f64) -> f64 {
    a + b - a * b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

/// Fuzzy k-NN edges for one point set, one entry per unordered pair with
/// `i < j`, sorted by `(i, j)`.
pub fn fuzzy_knn_edges(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Edge>> {
    let nn = knn(points, k, Metric::Euclidean)?;
    Ok(fuzzy_edges_from_knn(&nn))
}

pub fn fuzzy_edges_from_knn(nn: &Knn) -> Vec<Edge> {
    let n = nn.n();
    let scales: Vec<LocalScale> = par::map_range(n, |i| calibrate_local_scale(nn.distances(i), None));
    // (lo, hi) -> (w_{hi|lo}, w_{lo|hi})
    let mut pairs: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, scale) in scales.iter().enumerate() {
        for (&j, &d) in nn.indices(i).iter().zip(nn.distances(i)) {
            let w = directed_weight(d, scale);
            let entry = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = w;
            } else {
                entry.1 = w;
            }
        }
    }
    pairs
        .into_iter()
        .map(|((i, j), (a, b))| Edge {
            i,
            j,
            w: symmetrize(a, b),
        })
        .filter(|e| e.w > 0.0)
        .collect()
}

/// For each current row, the `per_node_cap` most cosine-similar history rows
/// with positive similarity. Edges are `(current_row, history_row, cos)`,
/// sorted by current row then descending weight.
pub fn temporal_edges(
    current: ArrayView2<'_, f64>,
    history: ArrayView2<'_, f64>,
    per_node_cap: usize,
) -> Result<Vec<Edge>> {
    if per_node_cap == 0 || current.nrows() == 0 || history.nrows() == 0 {
        return Ok(Vec::new());
    }
    if current.ncols() != history.ncols() {
        return Err(Error::DimensionMismatch {
            expected: current.ncols(),
            found: history.ncols(),
        });
    }
    let normalize = |m: ArrayView2<'_, f64>| {
        let mut out = m.to_owned();
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r /= n;
            } else {
                r.fill(0.0);
            }
        }
        out
    };
    let cur = normalize(current);
    let hist = normalize(history);
    const BLOCK: usize = 256;
    let n = cur.nrows();
    let blocks = n.div_ceil(BLOCK);
    let per_block: Vec<Vec<Edge>> = par::map_range(blocks, |b| {
        let start = b * BLOCK;
        let end = (start + BLOCK).min(n);
        let sims = cur.slice(s![start..end, ..]).dot(&hist.t());
        let mut out = Vec::new();
        let mut row_edges: Vec<(f64, usize)> = Vec::new();
        for (bi, row) in sims.rows().into_iter().enumerate() {
            row_edges.clear();
            row_edges.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0.0)
                    .map(|(j, &c)| (c.min(1.0), j)),
            );
            let cap = per_node_cap.min(row_edges.len());
            let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if cap < row_edges.len() && cap > 0 {
                row_edges.select_nth_unstable_by(cap - 1, order);
            }
            row_edges.truncate(cap);
            row_edges.sort_unstable_by(order);
            out.extend(row_edges.iter().map(|&(w, j)| Edge { i: start + bi, j, w }));
        }
        out
    });
    Ok(per_block.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub epoch: u32,
    /// Row of the node in its epoch's snapshot.
    pub global_index: u32,
}

/// Graph over the sampled working memory. Current-slice nodes come first,
/// followed by each history slice in memory order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalGraph {
    pub points: Array2<f64>,
    pub nodes: Vec<GraphNode>,
    pub current_count: usize,
    pub spatial_edges: Vec<Edge>,
    /// `i` is a current node, `j` a history node (both graph indices).
    pub temporal_edges: Vec<Edge>,
    pub knn_k: usize,
}

impl SpatioTemporalGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.spatial_edges.len() + self.temporal_edges.len()
    }

    pub fn is_current(&self, node: usize) -> bool {
        node < self.current_count
    }

    /// Graph containing one slice and its fuzzy k-NN edges only.
    pub fn spatial_only(points: Array2<f64>, epoch: u32, global_index: Vec<u32>, k: usize) -> Result<Self> {
        let spatial_edges = fuzzy_knn_edges(points.view(), k)?;
        let nodes = global_index
            .into_iter()
            .map(|g| GraphNode { epoch, global_index: g })
            .collect::<Vec<_>>();
        if nodes.len() != points.nrows() {
            return Err(Error::Shape("one node id per point required".into()));
        }
        Ok(Self {
            current_count: points.nrows(),
            points,
            nodes,
            spatial_edges,
            temporal_edges: Vec::new(),
            knn_k: k,
        })
    }

    /// JSON lines `{type, i, j, w}`, spatial edges first.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            #[serde(rename = "type")]
            kind: EdgeKind,
            i: usize,
            j: usize,
            w: f64,
        }
        for (kind, edges) in [
            (EdgeKind::Spatial, &self.spatial_edges),
            (EdgeKind::Temporal, &self.temporal_edges),
        ] {
            for e in edges {
                serde_json::to_writer(
                    &mut out,
                    &Line {
                        kind,
                        i: e.i,
                        j: e.j,
                        w: e.w,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub k: usize,
    pub sample_ratio: f64,
    pub per_node_cap: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            k: 15,
            sample_ratio: 1.0,
            per_node_cap: 5,
            seed: 0,
        }
    }
}

fn slice_seed(seed: u64, epoch: u32) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (u64::from(epoch) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn build_graph(memory: &WorkingMemory, params: &GraphParams) -> Result<SpatioTemporalGraph> {
    if !(params.sample_ratio > 0.0 && params.sample_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample_ratio must be in (0, 1], got {}",
            params.sample_ratio
        )));
    }
    let d = memory.current.d();
    let mut blocks: Vec<(u32, Vec<usize>, Array2<f64>)> = Vec::new();
    for snap in std::iter::once(&memory.current).chain(&memory.history) {
        let idx = random_sample(snap.n(), params.sample_ratio, slice_seed(params.seed, snap.epoch));
        let rows = gather(snap.to_f64().view(), &idx);
        blocks.push((snap.epoch, idx, rows));
    }

    let current_count = blocks[0].1.len();
    if current_count <= params.k {
        return Err(Error::InsufficientPoints {
            k: params.k,
            got: current_count,
        });
    }
    let total: usize = blocks.iter().map(|b| b.1.len()).sum();
    let mut points = Array2::<f64>::zeros((total, d));
    let mut nodes = Vec::with_capacity(total);
    let mut offset = 0;
    for (epoch, idx, rows) in &blocks {
        points.slice_mut(s![offset..offset + idx.len(), ..]).assign(rows);
        nodes.extend(idx.iter().map(|&g| GraphNode {
            epoch: *epoch,
            global_index: g as u32,
        }));
        offset += idx.len();
    }

    let current = points.slice(s![..current_count, ..]);
    let spatial_edges = fuzzy_knn_edges(current, params.k)?;
    let history = points.slice(s![current_count.., ..]);
    let temporal_edges = temporal_edges(current, history, params.per_node_cap)?
        .into_iter()
        .map(|e| Edge {
            i: e.i,
            j: e.j + current_count,
            w: e.w,
        })
        .collect();

    Ok(SpatioTemporalGraph {
        points,
        nodes,
        current_count,
        spatial_edges,
        temporal_edges,
        knn_k: params.k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RepresentationSnapshot;
    use crate::memory::{assemble, MemoryStore};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn directed_weight_examples() {
        let sc = LocalScale { rho: 0.5, sigma: 2.0 };
        assert_eq!(directed_weight(0.5, &sc), 1.0);
        assert!((directed_weight(2.5, &sc) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(directed_weight(0.1, &sc), 1.0);
    }

    #[test]
    fn symmetrize_examples() {
        assert_eq!(symmetrize(0.5, 0.5), 0.75);
        assert_eq!(symmetrize(1.0, 0.0), 1.0);
        assert!((symmetrize(0.2, 0.4) - 0.52).abs() < 1e-15);
        assert_eq!(symmetrize(0.3, 0.9), symmetrize(0.9, 0.3));
    }

    #[test]
    fn calibration_degenerate_cases() {
        let all_equal = [2.0, 2.0, 2.0, 2.0];
        assert_eq!(calibrate_local_scale(&all_equal, None).sigma, 2.0 * 1e3);
        let ln2 = std::f64::consts::LN_2;
        let sc = calibrate_local_scale(&[0.0, ln2], None);
        assert!((sc.sigma - 1e-3 * ln2 / 2.0).abs() < 1e-15, "{sc:?}");
    }

    #[test]
    fn calibration_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [3usize, 5, 15, 40] {
            for _ in 0..50 {
                let mut d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
                d.sort_by(f64::total_cmp);
                let sc = calibrate_local_scale(&d, None);
                let lhs: f64 = d.iter().map(|&x| directed_weight(x, &sc)).sum();
                let mean = d.iter().sum::<f64>() / k as f64;
                let clamped = sc.sigma <= 1e-3 * mean * 1.0000001 || sc.sigma >= 1e3 * mean * 0.9999999;
                if !clamped {
                    assert!((lhs - (k as f64).log2()).abs() < 1e-4, "k={k} lhs={lhs}");
                }
            }
        }
    }

    #[test]
    fn temporal_edge_examples() {
        let e = temporal_edges(array![[1.0, 0.0]].view(), array![[2.0, 0.0]].view(), 5).unwrap();
        assert_eq!(e, vec![Edge { i: 0, j: 0, w: 1.0 }]);
        let e = temporal_edges(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), 5).unwrap();
        assert!(e.is_empty());
        let e = temporal_edges(array![[1.0, 1.0]].view(), array![[1.0, 0.0]].view(), 5).unwrap();
        assert!((e[0].w - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let e = temporal_edges(array![[0.0, 0.0]].view(), array![[1.0, 0.0]].view(), 5).unwrap();
        assert!(e.is_empty());
        let e = temporal_edges(array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view(), 0).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn temporal_cap_keeps_strongest() {
        let cur = array![[1.0, 0.0]];
        let hist = array![[1.0, 0.1], [1.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.5]];
        let e = temporal_edges(cur.view(), hist.view(), 2).unwrap();
        assert_eq!(e.iter().map(|e| e.j).collect::<Vec<_>>(), vec![2, 0]);
    }

    fn snap(epoch: u32, m: Array2<f32>) -> RepresentationSnapshot {
        RepresentationSnapshot::new(epoch, 0, m, None, None).unwrap()
    }

    #[test]
    fn first_epoch_has_no_temporal_edges() {
        let m = Array2::from_shape_fn((20, 3), |(i, j)| (i * 3 + j) as f32 * 0.1);
        let mem = assemble(snap(0, m), &MemoryStore::default()).unwrap();
        let g = build_graph(
            &mem,
            &GraphParams {
                k: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(g.temporal_edges.is_empty());
        assert_eq!(g.node_count(), 20);
        assert!(g.spatial_edges.iter().all(|e| e.w > 0.0 && e.w <= 1.0 && e.i < e.j));
    }

    #[test]
    fn temporal_edges_only_cross_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_snap = |e| snap(e, Array2::from_shape_fn((40, 4), |_| rng.random_range(-1.0f32..1.0)));
        let store = MemoryStore::new((0..4).map(&mut rand_snap));
        let mem = assemble(rand_snap(4), &store).unwrap();
        let params = GraphParams {
            k: 5,
            sample_ratio: 0.5,
            per_node_cap: 3,
            seed: 1,
        };
        let g = build_graph(&mem, &params).unwrap();
        assert_eq!(g.current_count, 20);
        assert_eq!(g.node_count(), 60);
        assert!(g.temporal_edges.iter().all(|e| g.is_current(e.i) && !g.is_current(e.j)));
        assert!(g.temporal_edges.len() <= 3 * 20);
        assert!(g.spatial_edges.iter().all(|e| g.is_current(e.i) && g.is_current(e.j)));
        assert_eq!(build_graph(&mem, &params).unwrap(), g);

        let none = build_graph(
            &mem,
            &GraphParams {
                per_node_cap: 0,
                ..params
            },
        )
        .unwrap();
        assert!(none.temporal_edges.is_empty());
    }

    #[test]
    fn jsonl_dump() {
        let m = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let g = SpatioTemporalGraph::spatial_only(m, 0, (0..6).collect(), 2).unwrap();
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["type"], "spatial");
        assert_eq!(text.lines().count(), g.spatial_edges.len());
    }
}
