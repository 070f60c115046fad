//! Binary checkpoint container. Layout, all integers little-endian:
//!
//! ```text
//! magic   b"DQCK"
//! version u32 (= 1)
//! config  u64 byte length, then UTF-8 text
//! count   u64 number of tensors
//! tensor  u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//!         prod(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Decoder;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DQCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("parameter {name}: {reason}")]
    Mismatch { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn malformed(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Malformed("truncated".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(malformed)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(malformed)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: u64) -> Result<String, CheckpointError> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(CheckpointError::Malformed("truncated".into()));
    }
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic).map_err(malformed)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = read_u64(r)?;
        let config = read_string(r, len)?;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)?;
            let name = read_string(r, len as u64)?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
            let mut bytes = Vec::new();
            r.take(numel as u64 * 8).read_to_end(&mut bytes)?;
            if bytes.len() != numel * 8 {
                return Err(CheckpointError::Malformed("truncated".into()));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { config, tensors })
    }
}

pub fn save_checkpoint(path: &Path, decoder: &Decoder, config: &str) -> Result<(), CheckpointError> {
    let ckpt = Checkpoint { config: config.to_string(), tensors: decoder.named_tensors() };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

impl Decoder {
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match
    /// this decoder exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        if tensors.len() != self.params.len() {
            return Err(CheckpointError::Mismatch {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", self.params.len(), tensors.len()),
            });
        }
        for (name, t) in tensors {
            let mismatch = |reason: String| CheckpointError::Mismatch { name: name.clone(), reason };
            let id = self.params.id(name).ok_or_else(|| mismatch("unknown parameter".into()))?;
            let want = self.params.get(id).shape();
            if want != t.shape() {
                return Err(mismatch(format!("shape {:?}, expected {want:?}", t.shape())));
            }
            self.params.set(id, t.clone());
        }
        Ok(())
    }
}
