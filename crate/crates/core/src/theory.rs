//! Empirical checks of the sampling theory: manifold samplers, covering
//! radius, the covering/density equivalence, and the tipping curve.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::SpatioTemporalGraph;
use crate::ingest::{synth_trajectory, Scenario, SynthConfig};
use crate::metrics::intraslice_preservation;
use crate::neighbors::sq_euclidean;
use crate::par;
use crate::projection::{train, Init, TrainConfig};
use crate::sampling::{avg_knn_distance, density_ratio, gather, random_sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    /// Unit circle in the first two ambient coordinates.
    Circle,
    /// Unit 2-sphere in the first three ambient coordinates.
    Sphere,
    /// Ten well-separated Gaussian clusters from the synthetic generator.
    Clusters,
}

impl FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "circle" => Ok(Self::Circle),
            "sphere" => Ok(Self::Sphere),
            "clusters" => Ok(Self::Clusters),
            other => Err(Error::InvalidArgument(format!("unknown manifold kind {other:?}"))),
        }
    }
}

impl fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Circle => "circle",
            Self::Sphere => "sphere",
            Self::Clusters => "clusters",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSample {
    pub kind: ManifoldKind,
    pub points: Array2<f64>,
    /// Class of each point for the cluster kind.
    pub labels: Option<Vec<u32>>,
    pub intrinsic_dim: usize,
    pub ambient_dim: usize,
}

pub const CLUSTER_COUNT: usize = 10;

/// Uniform sample of `n` points with optional isotropic ambient noise.
pub fn sample_manifold(kind: ManifoldKind, n: usize, ambient: usize, noise: f64, seed: u64) -> Result<ManifoldSample> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut points, labels, intrinsic) = match kind {
        ManifoldKind::Circle => {
            if ambient < 2 {
                return Err(Error::InvalidArgument("circle needs ambient dim >= 2".into()));
            }
            let mut p = Array2::<f64>::zeros((n, ambient));
            for i in 0..n {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                p[[i, 0]] = theta.cos();
                p[[i, 1]] = theta.sin();
            }
            (p, None, 1)
        }
        ManifoldKind::Sphere => {
            if ambient < 3 {
                return Err(Error::InvalidArgument("sphere needs ambient dim >= 3".into()));
            }
            let mut p = Array2::<f64>::zeros((n, ambient));
            for i in 0..n {
                loop {
                    let v: [f64; 3] = [
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    ];
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if norm > 1e-12 {
                        for c in 0..3 {
                            p[[i, c]] = v[c] / norm;
                        }
                        break;
                    }
                }
            }
            (p, None, 2)
        }
        ManifoldKind::Clusters => {
            let per_class = n.div_ceil(CLUSTER_COUNT);
            let mut cfg = SynthConfig::new(Scenario::Stable, 1, per_class, CLUSTER_COUNT, ambient, seed);
            cfg.separation = (cfg.separation.1, cfg.separation.1);
            cfg.spread = (cfg.spread.1, cfg.spread.1);
            let snap = synth_trajectory(&cfg)?.remove(0);
            let rows: Vec<usize> = (0..n)
                .map(|i| (i % CLUSTER_COUNT) * per_class + i / CLUSTER_COUNT)
                .collect();
            let labels: Vec<u32> = rows
                .iter()
                .map(|&r| snap.labels().expect("synthetic labels")[r])
                .collect();
            (gather(snap.to_f64().view(), &rows), Some(labels), cfg.latent_dim)
        }
    };
    if noise > 0.0 {
        points.mapv_inplace(|x| {
            let g: f64 = StandardNormal.sample(&mut rng);
            x + noise * g
        });
    }
    Ok(ManifoldSample {
        kind,
        points,
        labels,
        intrinsic_dim: intrinsic,
        ambient_dim: ambient,
    })
}

/// Largest distance from a reference point to its nearest sample point.
pub fn covering_radius(sample: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if sample.nrows() == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if sample.ncols() != reference.ncols() {
        return Err(Error::DimensionMismatch {
            expected: sample.ncols(),
            found: reference.ncols(),
        });
    }
    let s: Vec<Vec<f64>> = sample.rows().into_iter().map(|r| r.to_vec()).collect();
    let nearest = par::map_range(reference.nrows(), |i| {
        let y = reference.row(i).to_vec();
        s.iter().map(|p| sq_euclidean(&y, p)).fold(f64::INFINITY, f64::min)
    });
    Ok(nearest.into_iter().fold(0.0, f64::max).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub n: usize,
    pub seed: u64,
    pub covering_radius: f64,
    pub dbar_k: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub k: usize,
    pub rows: Vec<EquivalenceRow>,
    /// max ratio / min ratio over all rows.
    pub spread: f64,
}

/// Multiplier for the reference set used to estimate covering radii.
pub const REFERENCE_FACTOR: usize = 10;

/// Ratio `eps(S) / dbar_k(S)` for each size and seed.
pub fn equivalence_check(kind: ManifoldKind, sizes: &[usize], k: usize, seeds: &[u64]) -> Result<EquivalenceReport> {
    let ambient = match kind {
        ManifoldKind::Circle => 2,
        ManifoldKind::Sphere => 3,
        ManifoldKind::Clusters => 16,
    };
    let mut rows = Vec::new();
    for &n in sizes {
        if n < 4 * k {
            return Err(Error::InvalidArgument(format!("size {n} is below 4k = {}", 4 * k)));
        }
        for &seed in seeds {
            // one draw split in two so the reference covers the same manifold
            let all = sample_manifold(kind, (REFERENCE_FACTOR + 1) * n, ambient, 0.0, seed)?.points;
            let sample = all.slice(s![..n, ..]);
            let eps = covering_radius(sample, all.slice(s![n.., ..]))?;
            let dbar = avg_knn_distance(sample, k)?;
            rows.push(EquivalenceRow {
                n,
                seed,
                covering_radius: eps,
                dbar_k: dbar,
                ratio: eps / dbar,
            });
        }
    }
    let max = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    Ok(EquivalenceReport {
        k,
        rows,
        spread: max / min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TippingRow {
    pub ratio: f64,
    pub rel_density: f64,
    pub preservation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TippingCurve {
    pub rows: Vec<TippingRow>,
    /// Largest ratio whose preservation falls below `KNEE_FRACTION` of the
    /// ratio-1 value; the smallest probed ratio when none does.
    pub knee: f64,
}

pub const KNEE_FRACTION: f64 = 0.9;

impl TippingCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ratio,rel_density,preservation")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.ratio, r.rel_density, r.preservation)?;
        }
        Ok(())
    }
}

/// Training preset for [`tipping_curve`]: full sweeps over the graph and a
/// flat learning rate, so the step budget per ratio is set by `epochs` alone.
pub fn tipping_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        step_size: usize::MAX,
        max_batches_per_epoch: None,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains one projection per sampling ratio on the sampled subset and scores
/// neighbor preservation of the embedding of all points.
pub fn tipping_curve(
    points: ArrayView2<'_, f64>,
    ratios: &[f64],
    k: usize,
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<TippingCurve> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(Error::InvalidArgument("ratios must lie in (0, 1]".into()));
    }
    if ratios.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("ratios must be strictly decreasing".into()));
    }
    let n = points.nrows();
    let dbar_full = avg_knn_distance(points, k)?;
    let mut rows = Vec::with_capacity(ratios.len());
    for (step, &ratio) in ratios.iter().enumerate() {
        let idx = random_sample(n, ratio, seed.wrapping_add(step as u64));
        let (rel_density, preservation) = if idx.len() > k {
            let sub = gather(points, &idx);
            let rel_density = density_ratio(dbar_full, avg_knn_distance(sub.view(), k)?);
            let ids = idx.iter().map(|&i| i as u32).collect();
            let graph = SpatioTemporalGraph::spatial_only(sub, 0, ids, k)?;
            // Same optimizer-step budget at every ratio: a subset of a fraction
            // r of the points is swept 1/r times as often.
            let stretch = (1.0 / ratio).round().max(1.0) as usize;
            let cfg = TrainConfig {
                seed: train_cfg.seed ^ seed,
                epochs: train_cfg.epochs.saturating_mul(stretch),
                step_size: train_cfg.step_size.saturating_mul(stretch),
                ..train_cfg.clone()
            };
            let out = train(&graph, Init::Fresh, &cfg)?;
            let low = out.model.encode(points)?;
            (rel_density, intraslice_preservation(points, low.view(), k)?.fraction)
        } else {
            // too few points to have k neighbors
            (0.0, 0.0)
        };
        log::debug!("ratio {ratio}: rel_density {rel_density:.4} preservation {preservation:.4}");
        rows.push(TippingRow {
            ratio,
            rel_density,
            preservation,
        });
    }
    let baseline = rows.iter().find(|r| r.ratio == 1.0).unwrap_or(&rows[0]).preservation;
    let knee = rows
        .iter()
        .find(|r| r.preservation < KNEE_FRACTION * baseline)
        .map(|r| r.ratio)
        .unwrap_or(*ratios.last().unwrap());
    Ok(TippingCurve { rows, knee })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_points_lie_on_circle() {
        let s = sample_manifold(ManifoldKind::Circle, 500, 4, 0.0, 1).unwrap();
        for r in s.points.rows() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 1.0).abs() < 1e-9);
            assert_eq!(r[2], 0.0);
        }
        assert!(sample_manifold(ManifoldKind::Circle, 5, 2, 0.0, 1).is_err());
        assert!("torus".parse::<ManifoldKind>().is_err());
    }

    #[test]
    fn sphere_mean_near_origin() {
        let s = sample_manifold(ManifoldKind::Sphere, 10_000, 3, 0.0, 2).unwrap();
        let m = s.points.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(m.dot(&m).sqrt() < 0.05);
        for r in s.points.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clusters_delegate_to_generator() {
        let s = sample_manifold(ManifoldKind::Clusters, 200, 16, 0.0, 3).unwrap();
        assert_eq!(s.points.dim(), (200, 16));
        let labels = s.labels.unwrap();
        assert_eq!((0..10).filter(|c| labels.contains(c)).count(), 10);
    }

    #[test]
    fn covering_radius_examples() {
        let reference = sample_manifold(ManifoldKind::Circle, 20_000, 2, 0.0, 4).unwrap().points;
        assert_eq!(covering_radius(reference.view(), reference.view()).unwrap(), 0.0);
        let one = reference.slice(ndarray::s![0..1, ..]);
        assert!((covering_radius(one, reference.view()).unwrap() - 2.0).abs() < 0.01);
        let small = reference.slice(ndarray::s![0..50, ..]);
        let big = reference.slice(ndarray::s![0..200, ..]);
        assert!(covering_radius(big, reference.view()).unwrap() <= covering_radius(small, reference.view()).unwrap());
        assert!(covering_radius(reference.slice(ndarray::s![0..0, ..]), reference.view()).is_err());
    }

    #[test]
    fn regular_polygon_ratio_is_constant() {
        let k = 4;
        let ratio = |n: usize| {
            let s = Array2::from_shape_fn((n, 2), |(i, c)| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                if c == 0 {
                    t.cos()
                } else {
                    t.sin()
                }
            });
            let eps = 2.0 * (std::f64::consts::PI / (2.0 * n as f64)).sin();
            eps / avg_knn_distance(s.view(), k).unwrap()
        };
        let (a, b) = (ratio(400), ratio(1600));
        assert!((a / b - 1.0).abs() < 0.01, "{a} {b}");
    }

    #[test]
    fn equivalence_ratio_is_stable_across_seeds() {
        let seeds: Vec<u64> = (0..10).collect();
        let rep = equivalence_check(ManifoldKind::Circle, &[200], 15, &seeds).unwrap();
        let r: Vec<f64> = rep.rows.iter().map(|r| r.ratio).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        assert!(sd / mean < 0.5);
    }

    #[test]
    fn tipping_curve_shape_contract() {
        let s = sample_manifold(ManifoldKind::Clusters, 400, 32, 0.0, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            max_batches_per_epoch: Some(4),
            ..TrainConfig::default()
        };
        let curve = tipping_curve(s.points.view(), &[1.0, 0.5, 0.02], 10, 1, &cfg).unwrap();
        assert_eq!(curve.rows[0].rel_density, 1.0);
        assert_eq!(curve.rows[2].preservation, 0.0);
        assert!(curve.knee >= 0.02);
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        assert!(tipping_curve(s.points.view(), &[0.5, 1.0], 10, 1, &cfg).is_err());
    }
}
