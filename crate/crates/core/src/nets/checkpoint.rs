//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`, values little-endian `f64`):
//!
//! ```text
//! magic    8 bytes  "SOS-CKPT"
//! version  u32      1
//! label    u32 length + UTF-8 bytes   (model variant name)
//! d, n, P  u32 × 3
//! count    u32
//! count × { name: u32 length + UTF-8 bytes; rank: u32; dims: u32 × rank; values: f64 × product(dims) }
//! ```

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SOS-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub label: String,
    pub feature_dim: usize,
    pub classes: usize,
    pub patch_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Self {
        Self {
            header,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header.label);
        put_u32(&mut out, self.header.feature_dim);
        put_u32(&mut out, self.header.classes);
        put_u32(&mut out, self.header.patch_count);
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let label = get_str(&mut r)?;
        let header = CheckpointHeader {
            label,
            feature_dim: get_u32(&mut r)? as usize,
            classes: get_u32(&mut r)? as usize,
            patch_count: get_u32(&mut r)? as usize,
        };
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u32(&mut r)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            if numel.checked_mul(8).map_or(true, |b| b > r.len()) {
                return Err(CheckpointError::Truncated);
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Copies every tensor into the same-named parameter of `store`.
    /// Names and shapes must match one-to-one.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
        }
        for (name, t) in &self.tensors {
            let id = store.find(name).expect("checked above");
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated)
}

fn get_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, CheckpointError> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
}
