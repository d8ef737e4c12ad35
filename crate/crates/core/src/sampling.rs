//! k-NN density statistics and the optimal sampling ratio search.
//!
//! Density is compared in its scale-free form
//! `rel_density = dbar_k(full) / dbar_k(sample)`, where `dbar_k` is the mean
//! distance from each point to its k-th nearest neighbor. For a random subset
//! this sits in (0, 1] in expectation and falls as the subset thins out.

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{distance_matrix, knn, Metric};
use crate::par;

/// Largest point count for which the search caches a dense distance matrix.
pub const DENSE_CACHE_LIMIT: usize = 6000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub k: usize,
    pub dbar_sample: f64,
    pub dbar_full: f64,
    pub rel_density: f64,
}

/// `full / sample`, with the all-duplicates case (`sample == 0`) read as fully dense.
pub fn density_ratio(dbar_full: f64, dbar_sample: f64) -> f64 {
    if dbar_sample == 0.0 {
        1.0
    } else {
        dbar_full / dbar_sample
    }
}

/// Mean distance from each point to its k-th nearest neighbor (self excluded).
pub fn avg_knn_distance(points: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let n = points.nrows();
    if n <= k {
        return Err(Error::InsufficientPoints { k, got: n });
    }
    let nn = knn(points, k, Metric::Euclidean)?;
    Ok(nn.kth_distances().sum::<f64>() / n as f64)
}

fn check_subset(sample: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in sample {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "sample index {i} is out of range or repeated; sample must be a subset"
            )));
        }
    }
    Ok(())
}

/// Copies the selected rows into a new matrix.
pub fn gather(points: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), points.ncols()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(idx) {
        dst.assign(&points.row(i));
    }
    out
}

/// Density of the subset `sample` (row indices into `full`) relative to `full`.
pub fn relative_density(full: ArrayView2<'_, f64>, sample: &[usize], k: usize) -> Result<DensityReport> {
    check_subset(sample, full.nrows())?;
    let dbar_full = avg_knn_distance(full, k)?;
    let dbar_sample = avg_knn_distance(gather(full, sample).view(), k)?;
    Ok(DensityReport {
        k,
        dbar_sample,
        dbar_full,
        rel_density: density_ratio(dbar_full, dbar_sample),
    })
}

/// Number of points kept at `ratio`: `floor(ratio * n)`, at least 1.
pub fn sample_size(n: usize, ratio: f64) -> usize {
    let m = (ratio * n as f64 + 1e-9).floor() as usize;
    m.clamp(1, n.max(1))
}

/// Uniform sample without replacement, returned in ascending order.
pub fn random_sample(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1], got {ratio}");
    let m = sample_size(n, ratio);
    if m >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub eta_th: f64,
    pub dbar_full: f64,
}

/// Anchors the threshold to the full data. In the relative formulation the
/// full set has density 1, so the fraction itself is the threshold.
pub fn auto_threshold(points: ArrayView2<'_, f64>, k: usize, fraction: f64) -> Result<Threshold> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(Threshold {
        eta_th: fraction,
        dbar_full: avg_knn_distance(points, k)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    pub eta_th: f64,
    pub precision: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k: 15,
            eta_th: 0.8,
            precision: 0.01,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub ratio: f64,
    pub rel_density: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSearchResult {
    pub optimal_ratio: f64,
    pub iterations: usize,
    pub probes: Vec<Probe>,
    /// No probed ratio met the threshold; the full data is used.
    pub fallback: bool,
    pub dbar_full: f64,
}

/// Evaluates averaged relative density of random subsets at arbitrary ratios.
///
/// Small inputs cache the full distance matrix so each probe costs O(m^2)
/// instead of O(m^2 d).
pub struct DensityProbe<'a> {
    points: ArrayView2<'a, f64>,
    k: usize,
    dense: Option<Array2<f64>>,
    dbar_full: f64,
}

impl<'a> DensityProbe<'a> {
    pub fn new(points: ArrayView2<'a, f64>, k: usize) -> Result<Self> {
        let n = points.nrows();
        if n <= k {
            return Err(Error::InsufficientPoints { k, got: n });
        }
        let dense = (n <= DENSE_CACHE_LIMIT).then(|| distance_matrix(points));
        let mut probe = Self {
            points,
            k,
            dense,
            dbar_full: 0.0,
        };
        probe.dbar_full = match &probe.dense {
            Some(_) => probe.dbar_subset(&(0..n).collect::<Vec<_>>()),
            None => avg_knn_distance(points, k)?,
        };
        Ok(probe)
    }

    pub fn dbar_full(&self) -> f64 {
        self.dbar_full
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    /// Mean k-th-NN distance within a subset of at least k+1 points.
    fn dbar_subset(&self, idx: &[usize]) -> f64 {
        let k = self.k;
        match &self.dense {
            Some(dm) => {
                let kth: Vec<f64> = par::map_slice(idx, |&i| {
                    let row = dm.row(i);
                    let mut d: Vec<f64> = idx.iter().filter(|&&j| j != i).map(|&j| row[j]).collect();
                    *d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b)).1
                });
                kth.iter().sum::<f64>() / idx.len() as f64
            }
            None => avg_knn_distance(gather(self.points, idx).view(), k).expect("caller guarantees more than k points"),
        }
    }

    /// Relative density of one subset. Subsets too small to have k neighbors
    /// count as density 0, except for degenerate all-duplicate data.
    pub fn rel_density_of(&self, idx: &[usize]) -> f64 {
        if self.dbar_full == 0.0 {
            return 1.0;
        }
        if idx.len() <= self.k {
            return 0.0;
        }
        density_ratio(self.dbar_full, self.dbar_subset(idx))
    }

    /// Mean relative density over `repeats` seeded subsets at `ratio`.
    pub fn mean_rel_density(&self, ratio: f64, seeds: &[u64]) -> f64 {
        let vals: Vec<f64> = seeds
            .iter()
            .map(|&s| self.rel_density_of(&random_sample(self.n(), ratio, s)))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Seed of repeat `r` at search iteration `it`.
fn probe_seed(seed: u64, it: usize, r: usize) -> u64 {
    seed ^ ((it as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ ((r as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

/// Binary search for the smallest sampling ratio whose averaged relative
/// density still meets `eta_th`.
///
/// The bracket `[lo, hi]` always has `hi` feasible (ratio 1 is the full
/// data) and `lo` infeasible or the origin; it halves until narrower than
/// `precision` and `hi` is returned. Equivalently, the fraction pruned is
/// pushed up whenever a probe is feasible.
pub fn optimal_sampling_ratio(points: ArrayView2<'_, f64>, params: &SearchParams) -> Result<SamplingSearchResult> {
    let probe = DensityProbe::new(points, params.k)?;
    search_with(&probe, params)
}

pub fn search_with(probe: &DensityProbe<'_>, params: &SearchParams) -> Result<SamplingSearchResult> {
    if !(params.precision > 0.0 && params.precision < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "precision must be in (0, 1), got {}",
            params.precision
        )));
    }
    if params.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut probes = Vec::new();
    let mut found = false;
    let mut it = 0;
    while hi - lo > params.precision {
        let mid = 0.5 * (lo + hi);
        let seeds: Vec<u64> = (0..params.repeats).map(|r| probe_seed(params.seed, it, r)).collect();
        let rel = probe.mean_rel_density(mid, &seeds);
        let feasible = rel >= params.eta_th;
        probes.push(Probe {
            ratio: mid,
            rel_density: rel,
            feasible,
        });
        if feasible {
            hi = mid;
            found = true;
        } else {
            lo = mid;
        }
        it += 1;
    }
    Ok(SamplingSearchResult {
        optimal_ratio: hi,
        iterations: it,
        probes,
        fallback: !found,
        dbar_full: probe.dbar_full(),
    })
}
