//! Snapshot ingestion: the on-disk representation format, directory scanning
//! and the synthetic trajectory generator.

mod format;
mod manifest;
mod synth;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub use format::{
    decode_snapshot, encode_snapshot, read_header, read_snapshot, snapshot_file_name, write_snapshot, SnapshotHeader,
    FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use manifest::{scan_dir, ManifestEntry, SnapshotManifest, MANIFEST_VERSION};
pub use synth::{synth_trajectory, Scenario, SynthConfig};

/// One epoch's hidden representations of a fixed probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSnapshot {
    pub epoch: u32,
    /// Continual-learning task tag; 0 for single-task runs.
    pub task_id: u32,
    matrix: Array2<f32>,
    labels: Option<Vec<u32>>,
    predictions: Option<Vec<u32>>,
}

impl RepresentationSnapshot {
    pub fn new(
        epoch: u32,
        task_id: u32,
        matrix: Array2<f32>,
        labels: Option<Vec<u32>>,
        predictions: Option<Vec<u32>>,
    ) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("snapshot must be non-empty, got {n}x{d}")));
        }
        check_finite(matrix.view())?;
        for (name, v) in [("labels", &labels), ("predictions", &predictions)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Shape(format!("{name} has length {}, expected {n}", v.len())));
                }
            }
        }
        Ok(Self {
            epoch,
            task_id,
            matrix,
            labels,
            predictions,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        self.matrix.view()
    }

    /// Activations widened to f64 for numerical work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.matrix.mapv(f64::from)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn predictions(&self) -> Option<&[u32]> {
        self.predictions.as_deref()
    }
}

fn check_finite(m: ArrayView2<'_, f32>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        let m = array![[1.0f32, f32::NAN]];
        assert!(matches!(
            RepresentationSnapshot::new(0, 0, m, None, None),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let m = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert!(matches!(
            RepresentationSnapshot::new(0, 0, m.clone(), Some(vec![1]), None),
            Err(Error::Shape(_))
        ));
        assert!(RepresentationSnapshot::new(0, 0, m, Some(vec![1, 2]), Some(vec![0, 0])).is_ok());
    }

    #[test]
    fn rejects_empty() {
        let m = Array2::<f32>::zeros((0, 3));
        assert!(RepresentationSnapshot::new(0, 0, m, None, None).is_err());
    }
}
