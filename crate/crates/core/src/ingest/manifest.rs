use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_header, read_snapshot, MAGIC};
use super::RepresentationSnapshot;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub epoch: u32,
    pub path: PathBuf,
    pub n: usize,
    pub d: usize,
}

/// Snapshot files of one directory, ordered by epoch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SnapshotManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl SnapshotManifest {
    pub fn epochs(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.epoch).collect()
    }

    pub fn get(&self, epoch: u32) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by_key(&epoch, |e| e.epoch)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.d)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON array of `{epoch, path, n, d}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    /// Loads the snapshot of `epoch`; a listed-but-unreadable file is a load error.
    pub fn load(&self, epoch: u32) -> Result<RepresentationSnapshot> {
        let entry = self.get(epoch).ok_or_else(|| Error::MissingEpoch {
            epoch,
            reason: "not in manifest".into(),
        })?;
        read_snapshot(&entry.path).map_err(|e| Error::MissingEpoch {
            epoch,
            reason: e.to_string(),
        })
    }
}

/// Lists the snapshot files in `dir`.
///
/// Hidden files (including in-flight temp files of an atomic write) and files
/// without the snapshot magic are skipped.
pub fn scan_dir(dir: &Path) -> Result<SnapshotManifest> {
    let mut by_epoch: BTreeMap<u32, ManifestEntry> = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io_at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    paths.sort();

    let mut dim: Option<usize> = None;
    for path in paths {
        if !has_magic(&path) {
            continue;
        }
        let header = read_header(&path)?;
        let d = header.d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => return Err(Error::DimensionMismatch { expected, found: d }),
            _ => {}
        }
        if by_epoch.contains_key(&header.epoch) {
            return Err(Error::DuplicateEpoch(header.epoch));
        }
        by_epoch.insert(
            header.epoch,
            ManifestEntry {
                epoch: header.epoch,
                path,
                n: header.n as usize,
                d,
            },
        );
    }
    Ok(SnapshotManifest {
        version: MANIFEST_VERSION,
        entries: by_epoch.into_values().collect(),
    })
}

fn has_magic(path: &Path) -> bool {
    use std::io::Read;
    let mut buf = [0u8; 4];
    fs::File::open(path).and_then(|mut f| f.read_exact(&mut buf)).is_ok() && &buf == MAGIC
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{snapshot_file_name, write_snapshot};
    use ndarray::Array2;

    fn put(dir: &Path, name: &str, epoch: u32, d: usize) {
        let s = RepresentationSnapshot::new(epoch, 0, Array2::zeros((3, d)), None, None).unwrap();
        write_snapshot(&s, &dir.join(name)).unwrap();
    }

    #[test]
    fn sorted_by_epoch_and_skips_junk() {
        let dir = tempfile::tempdir().unwrap();
        for e in [2, 0, 1] {
            put(dir.path(), &format!("x{e}.bin"), e, 4);
        }
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        fs::write(dir.path().join(".epoch_9.scam.tmp"), b"SCAM").unwrap();
        let m = scan_dir(dir.path()).unwrap();
        assert_eq!(m.epochs(), vec![0, 1, 2]);
        assert_eq!(m.dim(), Some(4));
        let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 3);
        assert_eq!(json[0]["n"], 3);
    }

    #[test]
    fn empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dir(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_and_mixed_dims() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "a", 5, 4);
        put(dir.path(), "b", 5, 4);
        assert!(matches!(scan_dir(dir.path()), Err(Error::DuplicateEpoch(5))));

        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), &snapshot_file_name(0), 0, 4);
        put(dir.path(), &snapshot_file_name(1), 1, 5);
        assert!(matches!(
            scan_dir(dir.path()),
            Err(Error::DimensionMismatch { expected: 4, found: 5 })
        ));
    }
}
