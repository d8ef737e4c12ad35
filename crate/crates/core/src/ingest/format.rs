//! Binary snapshot layout (all integers little-endian):
//!
//! ```text
//! "SCAM" | version u16 | epoch u32 | task_id u32 | n u32 | d u32 | flags u8
//! n*d f32 row-major | labels n*u32 (flags bit0) | predictions n*u32 (flags bit1)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::RepresentationSnapshot;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCAM";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 23;

const FLAG_LABELS: u8 = 0b01;
const FLAG_PREDICTIONS: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub version: u16,
    pub epoch: u32,
    pub task_id: u32,
    pub n: u32,
    pub d: u32,
    pub flags: u8,
}

impl SnapshotHeader {
    fn payload_len(&self) -> usize {
        let n = self.n as usize;
        let mut len = n * self.d as usize * 4;
        if self.flags & FLAG_LABELS != 0 {
            len += n * 4;
        }
        if self.flags & FLAG_PREDICTIONS != 0 {
            len += n * 4;
        }
        len
    }
}

/// Canonical file name for an epoch, zero-padded so lexical order matches epoch order.
pub fn snapshot_file_name(epoch: u32) -> String {
    format!("epoch_{epoch:06}.scam")
}

pub fn encode_snapshot(s: &RepresentationSnapshot) -> Vec<u8> {
    let (n, d) = (s.n(), s.d());
    let mut flags = 0u8;
    if s.labels().is_some() {
        flags |= FLAG_LABELS;
    }
    if s.predictions().is_some() {
        flags |= FLAG_PREDICTIONS;
    }
    let header = SnapshotHeader {
        version: FORMAT_VERSION,
        epoch: s.epoch,
        task_id: s.task_id,
        n: n as u32,
        d: d as u32,
        flags,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&header.epoch.to_le_bytes());
    out.extend_from_slice(&header.task_id.to_le_bytes());
    out.extend_from_slice(&header.n.to_le_bytes());
    out.extend_from_slice(&header.d.to_le_bytes());
    out.push(flags);
    for v in s.matrix().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.labels().into_iter().chain(s.predictions()).flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<SnapshotHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a snapshot file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let header = SnapshotHeader {
        version,
        epoch: u32_at(6),
        task_id: u32_at(10),
        n: u32_at(14),
        d: u32_at(18),
        flags: bytes[22],
    };
    if header.flags & !(FLAG_LABELS | FLAG_PREDICTIONS) != 0 {
        return Err(Error::Format(format!("unknown flag bits {:#04x}", header.flags)));
    }
    if header.n == 0 || header.d == 0 {
        return Err(Error::Format(format!("empty snapshot {}x{}", header.n, header.d)));
    }
    Ok(header)
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<RepresentationSnapshot> {
    let header = parse_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let (n, d) = (header.n as usize, header.d as usize);
    let mut words = payload.chunks_exact(4).map(|c| c.try_into().unwrap());
    let data: Vec<f32> = words.by_ref().take(n * d).map(f32::from_le_bytes).collect();
    let mut take_u32 =
        |present: bool| present.then(|| words.by_ref().take(n).map(u32::from_le_bytes).collect::<Vec<_>>());
    let labels = take_u32(header.flags & FLAG_LABELS != 0);
    let predictions = take_u32(header.flags & FLAG_PREDICTIONS != 0);
    let matrix = Array2::from_shape_vec((n, d), data).expect("length checked above");
    RepresentationSnapshot::new(header.epoch, header.task_id, matrix, labels, predictions)
}

/// Writes atomically: the bytes land in a hidden temp file that is renamed into place.
pub fn write_snapshot(snapshot: &RepresentationSnapshot, path: &Path) -> Result<()> {
    let bytes = encode_snapshot(snapshot);
    let tmp = temp_path(path);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io_at(path, e)
    })
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

pub fn read_snapshot(path: &Path) -> Result<RepresentationSnapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_snapshot(&bytes)
}

/// Reads only the fixed-size header.
pub fn read_header(path: &Path) -> Result<SnapshotHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut f)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io_at(path, e))?;
    parse_header(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn snap(labels: Option<Vec<u32>>) -> RepresentationSnapshot {
        RepresentationSnapshot::new(0, 0, array![[1.0f32, 2.0]], labels, None).unwrap()
    }

    #[test]
    fn header_and_payload_sizes() {
        let bytes = encode_snapshot(&snap(None));
        assert_eq!(bytes.len(), 23 + 8);
        assert_eq!(&bytes[..4], b"SCAM");
        assert_eq!(bytes[22], 0);
    }

    #[test]
    fn labels_flag_and_trailer() {
        let bytes = encode_snapshot(&snap(Some(vec![3])));
        assert_eq!(bytes[22], 0x01);
        assert_eq!(&bytes[bytes.len() - 4..], &3u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_truncation_and_version() {
        let mut bytes = encode_snapshot(&snap(Some(vec![3])));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_snapshot(&bad), Err(Error::Format(_))));

        assert!(matches!(
            decode_snapshot(&bytes[..HEADER_LEN + 5]),
            Err(Error::Corrupt(_))
        ));

        bytes[4] = 9;
        assert!(matches!(decode_snapshot(&bytes), Err(Error::Version(9))));
    }

    #[test]
    fn unknown_flags_rejected() {
        let mut bytes = encode_snapshot(&snap(None));
        bytes[22] = 0x04;
        assert!(matches!(decode_snapshot(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(snapshot_file_name(0));
        let s = snap(Some(vec![7]));
        write_snapshot(&s, &path).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), s);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1);
        assert_eq!(read_header(&path).unwrap().n, 1);
    }

    fn arb_snapshot() -> impl Strategy<Value = RepresentationSnapshot> {
        (1usize..6, 1usize..6, any::<u32>(), any::<u32>(), any::<u8>()).prop_flat_map(|(n, d, epoch, task, flags)| {
            (
                prop::collection::vec(-1e6f32..1e6, n * d),
                prop::collection::vec(any::<u32>(), n),
                prop::collection::vec(any::<u32>(), n),
            )
                .prop_map(move |(data, l, p)| {
                    RepresentationSnapshot::new(
                        epoch,
                        task,
                        Array2::from_shape_vec((n, d), data).unwrap(),
                        (flags & 1 != 0).then_some(l),
                        (flags & 2 != 0).then_some(p),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(s in arb_snapshot()) {
            let back = decode_snapshot(&encode_snapshot(&s)).unwrap();
            prop_assert_eq!(back.matrix().as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            s.matrix().as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, s);
        }
    }
}
