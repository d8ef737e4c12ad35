//! Model checkpoint layout (little-endian):
//!
//! ```text
//! "SCMM" | version u16 | epoch u32 | d u32 | max_groups u32 | a f64 | b f64
//! tensor_count u32 | per tensor: len u32, len*f64
//! stats_count u32  | per BN statistic: len u32, len*f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::curve::EmbeddingCurve;
use super::network::{init_model, Autoencoder};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SCMM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub epoch: u32,
    pub curve: EmbeddingCurve,
    pub model: Autoencoder,
}

pub fn model_file_name(epoch: u32) -> String {
    format!("model_{epoch:06}.scmm")
}

fn put_block(buf: &mut Vec<u8>, tensors: &[&[f64]]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_model(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut model = ckpt.model.clone();
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&(model.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.max_groups as u32).to_le_bytes());
    buf.extend_from_slice(&ckpt.curve.a.to_le_bytes());
    buf.extend_from_slice(&ckpt.curve.b.to_le_bytes());
    put_block(&mut buf, &model.tensors());
    let stats: Vec<&[f64]> = model.running_stats_mut().into_iter().map(|s| &*s).collect();
    put_block(&mut buf, &stats);
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("model checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill_block(&mut self, targets: Vec<&mut [f64]>) -> Result<()> {
        let count = self.u32()? as usize;
        if count != targets.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {count}",
                targets.len()
            )));
        }
        for t in targets {
            let len = self.u32()? as usize;
            if len != t.len() {
                return Err(Error::Corrupt(format!("tensor length {len}, expected {}", t.len())));
            }
            for v in t.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Version(version));
    }
    let epoch = c.u32()?;
    let d = c.u32()? as usize;
    let max_groups = c.u32()? as usize;
    let curve = EmbeddingCurve {
        a: c.f64()?,
        b: c.f64()?,
    };
    if max_groups == 0 {
        return Err(Error::Corrupt("zero group cap".into()));
    }
    let mut model = init_model(d, max_groups, 0)?;
    c.fill_block(model.tensors_mut())?;
    c.fill_block(model.running_stats_mut())?;
    if c.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after model checkpoint".into()));
    }
    if !model.is_finite() || !(curve.a > 0.0 && curve.b > 0.0) {
        return Err(Error::Corrupt("non-finite or invalid parameters".into()));
    }
    Ok(ModelCheckpoint { epoch, curve, model })
}

pub fn save_model(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad model path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io_at(&tmp, e))?;
    f.write_all(&encode_model(ckpt)).map_err(|e| Error::io_at(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io_at(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_model(&bytes)
}
