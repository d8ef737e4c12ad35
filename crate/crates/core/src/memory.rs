//! Selective working memory: the current snapshot plus history at
//! power-of-two epoch offsets `t - 2^n`, `n >= 1`.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ingest::{RepresentationSnapshot, SnapshotManifest};

/// Membership test over available epochs.
pub trait EpochSet {
    fn contains_epoch(&self, epoch: u32) -> bool;
}

impl EpochSet for [u32] {
    /// Expects ascending order.
    fn contains_epoch(&self, epoch: u32) -> bool {
        self.binary_search(&epoch).is_ok()
    }
}

impl EpochSet for Vec<u32> {
    fn contains_epoch(&self, epoch: u32) -> bool {
        self.as_slice().contains_epoch(epoch)
    }
}

impl EpochSet for Range<u32> {
    fn contains_epoch(&self, epoch: u32) -> bool {
        self.contains(&epoch)
    }
}

impl EpochSet for BTreeSet<u32> {
    fn contains_epoch(&self, epoch: u32) -> bool {
        self.contains(&epoch)
    }
}

/// Historical epochs `t - 2^n` (n >= 1) present in `available`, most recent first.
pub fn select_history<S: EpochSet + ?Sized>(t: u32, available: &S) -> Vec<u32> {
    let mut out = Vec::new();
    let mut offset: u32 = 2;
    while offset <= t {
        let past = t - offset;
        if available.contains_epoch(past) {
            out.push(past);
        }
        match offset.checked_mul(2) {
            Some(o) => offset = o,
            None => break,
        }
    }
    out
}

/// Source of historical snapshots.
pub trait SnapshotStore {
    /// Ascending list of epochs the store claims to hold.
    fn available(&self) -> Vec<u32>;
    fn fetch(&self, epoch: u32) -> Result<RepresentationSnapshot>;
}

impl SnapshotStore for SnapshotManifest {
    fn available(&self) -> Vec<u32> {
        self.epochs()
    }

    fn fetch(&self, epoch: u32) -> Result<RepresentationSnapshot> {
        self.load(epoch)
    }
}

/// In-memory store, mostly for tests and the synthetic pipeline.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    snapshots: std::collections::BTreeMap<u32, RepresentationSnapshot>,
}

impl MemoryStore {
    pub fn new(snapshots: impl IntoIterator<Item = RepresentationSnapshot>) -> Self {
        Self {
            snapshots: snapshots.into_iter().map(|s| (s.epoch, s)).collect(),
        }
    }

    pub fn insert(&mut self, s: RepresentationSnapshot) {
        self.snapshots.insert(s.epoch, s);
    }
}

impl SnapshotStore for MemoryStore {
    fn available(&self) -> Vec<u32> {
        self.snapshots.keys().copied().collect()
    }

    fn fetch(&self, epoch: u32) -> Result<RepresentationSnapshot> {
        self.snapshots.get(&epoch).cloned().ok_or_else(|| Error::MissingEpoch {
            epoch,
            reason: "not in store".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkingMemory {
    pub current: RepresentationSnapshot,
    /// Most recent first.
    pub history: Vec<RepresentationSnapshot>,
}

impl WorkingMemory {
    pub fn current_epoch(&self) -> u32 {
        self.current.epoch
    }

    pub fn history_epochs(&self) -> Vec<u32> {
        self.history.iter().map(|s| s.epoch).collect()
    }

    /// Node count before sampling.
    pub fn total_nodes(&self) -> usize {
        self.current.n() + self.history.iter().map(|s| s.n()).sum::<usize>()
    }
}

pub fn assemble<S: SnapshotStore + ?Sized>(current: RepresentationSnapshot, store: &S) -> Result<WorkingMemory> {
    let available = store.available();
    let wanted = select_history(current.epoch, available.as_slice());
    let mut history = Vec::with_capacity(wanted.len());
    for epoch in wanted {
        let snap = store.fetch(epoch)?;
        if snap.d() != current.d() {
            return Err(Error::DimensionMismatch {
                expected: current.d(),
                found: snap.d(),
            });
        }
        history.push(snap);
    }
    Ok(WorkingMemory { current, history })
}
