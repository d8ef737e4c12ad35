//! Fidelity of an embedding sequence: neighbor preservation within a slice,
//! prediction agreement of reconstructions, and rank agreement of movements
//! across slices.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::audit::class_centroids;
use crate::error::{Error, Result};
use crate::neighbors::{cosine_distance, euclidean, knn, Metric};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preservation {
    /// Mean overlap divided by `k`.
    pub fraction: f64,
    /// Mean raw overlap count.
    pub mean_count: f64,
}

/// Overlap of each point's `k` nearest neighbors in `high` and in `low`.
pub fn intraslice_preservation(high: ArrayView2<'_, f64>, low: ArrayView2<'_, f64>, k: usize) -> Result<Preservation> {
    if high.nrows() != low.nrows() {
        return Err(Error::Shape(format!(
            "{} high-dimensional rows vs {} embedded rows",
            high.nrows(),
            low.nrows()
        )));
    }
    let nh = knn(high, k, Metric::Euclidean)?;
    let nl = knn(low, k, Metric::Euclidean)?;
    let n = high.nrows();
    let counts = par::map_range(n, |i| {
        let mut a = nh.indices(i).to_vec();
        a.sort_unstable();
        nl.indices(i).iter().filter(|j| a.binary_search(j).is_ok()).count()
    });
    let mean_count = counts.iter().sum::<usize>() as f64 / n as f64;
    Ok(Preservation {
        fraction: mean_count / k as f64,
        mean_count,
    })
}

/// Class assignment for a single activation vector.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> u32;
}

impl<F: Fn(&[f64]) -> u32> Predictor for F {
    fn predict(&self, x: &[f64]) -> u32 {
        self(x)
    }
}

/// Assigns the label of the closest class centroid; ties go to the smaller label.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    pub classes: Vec<u32>,
    pub centroids: Array2<f64>,
}

impl NearestCentroid {
    pub fn fit(points: ArrayView2<'_, f64>, labels: &[u32]) -> Result<Self> {
        let (classes, centroids) = class_centroids(points, labels)?;
        if classes.is_empty() {
            return Err(Error::InvalidArgument("no labeled points".into()));
        }
        Ok(Self { classes, centroids })
    }
}

impl Predictor for NearestCentroid {
    fn predict(&self, x: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, 0usize);
        for (k, c) in self.centroids.rows().into_iter().enumerate() {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        self.classes[best.1]
    }
}

fn row_vec(m: ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Fraction of rows whose reconstruction gets the same prediction as the original.
pub fn reconstruction_accuracy<P: Predictor + ?Sized>(
    original: ArrayView2<'_, f64>,
    reconstructed: ArrayView2<'_, f64>,
    predictor: &P,
) -> Result<f64> {
    if original.dim() != reconstructed.dim() {
        return Err(Error::Shape(format!(
            "original {:?} vs reconstruction {:?}",
            original.dim(),
            reconstructed.dim()
        )));
    }
    let n = original.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no rows to compare".into()));
    }
    let same = (0..n)
        .filter(|&i| predictor.predict(&row_vec(original, i)) == predictor.predict(&row_vec(reconstructed, i)))
        .count();
    Ok(same as f64 / n as f64)
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then reported as 0.
    pub degenerate: bool,
}

/// Pearson correlation of two rank vectors. Ranks are doubled to integers so
/// the sums are exact and perfect agreement gives exactly +-1.
fn rank_correlation(ra: &[f64], rb: &[f64]) -> Option<f64> {
    let n = ra.len() as f64;
    let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(rb) {
        let (x, y) = (2.0 * x, 2.0 * y);
        sa += x;
        sb += y;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let cov = n * sab - sa * sb;
    let va = n * saa - sa * sa;
    let vb = n * sbb - sb * sb;
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "spearman needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(match rank_correlation(&average_ranks(a), &average_ranks(b)) {
        Some(rho) => Spearman { rho, degenerate: false },
        None => Spearman {
            rho: 0.0,
            degenerate: true,
        },
    })
}

/// Per-sample rank agreement between high- and low-dimensional movement.
///
/// `high[t]` and `low[t]` hold all samples at epoch `t` in the same row
/// order. For each sample the other epochs are ranked by their distance to
/// the anchor epoch (`None` means the last one): cosine distance in the high
/// space, Euclidean in the embedding.
pub fn interslice_correlation(
    high: &[ArrayView2<'_, f64>],
    low: &[ArrayView2<'_, f64>],
    anchor: Option<usize>,
) -> Result<Vec<f64>> {
    let t = high.len();
    if t != low.len() {
        return Err(Error::Shape(format!(
            "{t} high slices vs {} embedded slices",
            low.len()
        )));
    }
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "interslice correlation needs >= 3 epochs, got {t}"
        )));
    }
    let n = high[0].nrows();
    if high.iter().chain(low).any(|m| m.nrows() != n) {
        return Err(Error::Shape("trajectories are not aligned".into()));
    }
    let anchor = anchor.unwrap_or(t - 1);
    if anchor >= t {
        return Err(Error::InvalidArgument(format!("anchor {anchor} out of range")));
    }
    let others: Vec<usize> = (0..t).filter(|&e| e != anchor).collect();
    Ok(par::map_range(n, |i| {
        let ha = high[anchor].row(i).to_vec();
        let la = low[anchor].row(i).to_vec();
        let dh: Vec<f64> = others
            .iter()
            .map(|&e| cosine_distance(&ha, &high[e].row(i).to_vec()))
            .collect();
        let dl: Vec<f64> = others
            .iter()
            .map(|&e| euclidean(&la, &low[e].row(i).to_vec()))
            .collect();
        spearman(&dh, &dl).map(|s| s.rho).unwrap_or(0.0)
    }))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub epoch: u32,
    pub preservation: f64,
    pub preservation_count: f64,
    pub reconstruction_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FidelityReport {
    pub k: usize,
    pub epochs: Vec<FidelityRow>,
    pub interslice: Vec<f64>,
    pub interslice_mean: Option<f64>,
}

impl FidelityReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,intraslice_preservation,intraslice_count,reconstruction_accuracy"
        )?;
        for r in &self.epochs {
            let acc = r.reconstruction_accuracy.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.epoch, r.preservation, r.preservation_count, acc)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
