//! Exact k-nearest-neighbor search.
//!
//! Candidates are screened with a blocked Gram-matrix product and a rounding
//! bound wide enough to contain every true neighbor; the survivors are then
//! re-ranked with directly computed distances. Results are therefore exact
//! (ties go to the smaller index) while the bulk of the work runs through
//! gemm.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; a zero vector has cosine 0 with everything.
    Cosine,
}

/// Per-point neighbor lists, row-major `n x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Knn {
    pub fn n(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Distance to each point's k-th neighbor.
    pub fn kth_distances(&self) -> impl Iterator<Item = f64> + '_ {
        self.distances.chunks_exact(self.k).map(|r| r[r.len() - 1])
    }
}

#[inline]
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_euclidean(a, b).sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => euclidean(a, b),
        Metric::Cosine => cosine_distance(a, b),
    }
}

#[inline]
pub(crate) fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn standard(points: ArrayView2<'_, f64>) -> Array2<f64> {
    if points.is_standard_layout() {
        points.to_owned()
    } else {
        points.as_standard_layout().into_owned()
    }
}

/// Screening representation: rows whose pairwise Gram products rank neighbors.
struct Screen {
    rows: Array2<f64>,
    /// Squared norms (Euclidean) or zeros (cosine, rows unit-normalized).
    norms: Array1<f64>,
    metric: Metric,
    tol_scale: f64,
    max_norm: f64,
}

impl Screen {
    fn new(points: ArrayView2<'_, f64>, metric: Metric) -> Self {
        let d = points.ncols();
        let tol_scale = (4.0 * d as f64 + 16.0) * f64::EPSILON;
        match metric {
            Metric::Euclidean => {
                // Centering leaves distances unchanged and shrinks cancellation error.
                let mean = points.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
                let rows = &points - &mean;
                let norms: Array1<f64> = rows.rows().into_iter().map(|r| r.dot(&r)).collect();
                let max_norm = norms.iter().copied().fold(0.0, f64::max);
                Self {
                    rows,
                    norms,
                    metric,
                    tol_scale,
                    max_norm,
                }
            }
            Metric::Cosine => {
                let mut rows = standard(points);
                for mut r in rows.rows_mut() {
                    let n = r.dot(&r).sqrt();
                    if n > 0.0 {
                        r /= n;
                    }
                }
                let n = rows.nrows();
                Self {
                    rows,
                    norms: Array1::zeros(n),
                    metric,
                    tol_scale,
                    max_norm: 1.0,
                }
            }
        }
    }

    /// Approximate distance surrogate (squared distance or 1 - cos) for a block of rows.
    fn block(&self, start: usize, end: usize) -> Array2<f64> {
        let gram = self.rows.slice(s![start..end, ..]).dot(&self.rows.t());
        match self.metric {
            Metric::Euclidean => {
                let mut out = gram;
                for (bi, mut row) in out.rows_mut().into_iter().enumerate() {
                    let ni = self.norms[start + bi];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (ni + self.norms[j] - 2.0 * *v).max(0.0);
                    }
                }
                out
            }
            Metric::Cosine => gram.mapv(|g| 1.0 - g),
        }
    }

    fn tolerance(&self, i: usize) -> f64 {
        2.0 * self.tol_scale * (self.norms[i] + self.max_norm + 1.0)
    }
}

/// Exact `k` nearest neighbors of every point (self excluded), ascending by
/// distance with ties broken by the smaller index.
pub fn knn(points: ArrayView2<'_, f64>, k: usize, metric: Metric) -> Result<Knn> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::InsufficientPoints { k, got: n });
    }
    let exact = standard(points);
    let screen = Screen::new(points, metric);
    let blocks = n.div_ceil(ROW_BLOCK);

    let per_block: Vec<Vec<(usize, f64)>> = par::map_range(blocks, |b| {
        let start = b * ROW_BLOCK;
        let end = (start + ROW_BLOCK).min(n);
        let approx = screen.block(start, end);
        let mut out = Vec::with_capacity((end - start) * k);
        let mut scratch: Vec<f64> = Vec::with_capacity(n);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for (bi, row) in approx.rows().into_iter().enumerate() {
            let i = start + bi;
            scratch.clear();
            scratch.extend(row.iter().copied());
            scratch[i] = f64::INFINITY;
            let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            let cutoff = *kth + screen.tolerance(i);

            cands.clear();
            let xi = exact.row(i);
            let xi = xi.as_slice().expect("standard layout");
            for (j, &v) in row.iter().enumerate() {
                if j != i && v <= cutoff {
                    let xj = exact.row(j);
                    cands.push((distance(metric, xi, xj.as_slice().unwrap()), j));
                }
            }
            cands.sort_unstable_by(by_distance_then_index);
            out.extend(cands[..k].iter().map(|&(d, j)| (j, d)));
        }
        out
    });

    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (j, d) in per_block.into_iter().flatten() {
        indices.push(j);
        distances.push(d);
    }
    Ok(Knn { k, indices, distances })
}

/// Dense symmetric Euclidean distance matrix.
///
/// Entries come from the Gram product; pairs close enough for cancellation to
/// matter (including exact duplicates) are recomputed directly.
pub fn distance_matrix(points: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = points.nrows();
    let exact = standard(points);
    let screen = Screen::new(points, Metric::Euclidean);
    let mut out = Array2::<f64>::zeros((n, n));
    let slice = out.as_slice_mut().expect("fresh array is contiguous");
    par::for_each_chunk_mut(slice, ROW_BLOCK * n, |offset, chunk| {
        let start = offset / n;
        let end = start + chunk.len() / n;
        let approx = screen.block(start, end);
        for (bi, (dst, src)) in chunk.chunks_exact_mut(n).zip(approx.rows()).enumerate() {
            let i = start + bi;
            let xi = exact.row(i);
            let xi = xi.as_slice().unwrap();
            for (j, (d, &a)) in dst.iter_mut().zip(src.iter()).enumerate() {
                *d = if j == i {
                    0.0
                } else if a < 1e-4 * (screen.norms[i] + screen.norms[j]) + 1e-300 {
                    euclidean(xi, exact.row(j).as_slice().unwrap())
                } else {
                    a.sqrt()
                };
            }
        }
    });
    // Enforce exact symmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = out[[i, j]];
            out[[j, i]] = v;
        }
    }
    out
}
