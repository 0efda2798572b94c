//! Versioned, checksummed binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"AVCHASE-CKPT-v1"            15 bytes
//! version u32                           format revision
//! meta    u64 length + JSON bytes       config echo, counters, RNG states
//! tables  u64 count, then per tensor:
//!         u32 name length + name bytes
//!         u32 rank + u64 dims...
//!         f64 data...
//! digest  sha256 over all preceding bytes
//! ```
//!
//! Loads verify the checksum before parsing anything, so a corrupted file
//! never yields a partial checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diff::Tensor;
use crate::grid::{Observation, SavedEpisode};
use crate::rng::RngState;

pub const MAGIC: &[u8; 15] = b"AVCHASE-CKPT-v1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint file truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One environment slot's full training-time state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedEnvRunner {
    pub env_index: usize,
    pub episode_index: u64,
    pub episode: SavedEpisode,
    pub hidden: Vec<f64>,
    pub last_obs: Observation,
}

/// Everything besides the tensor tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved run configuration echo; runs are reconstructable from it.
    pub config: serde_json::Value,
    pub update: usize,
    pub env_steps: usize,
    pub episodes_completed: usize,
    pub adam_step: u64,
    pub action_rng: RngState,
    pub envs: Vec<SavedEnvRunner>,
    pub reward_window: Vec<f64>,
}

/// A checkpoint in memory: metadata plus named tensor tables
/// ("param/...", "adam_m/...", "adam_v/...").
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let meta = serde_json::to_vec(&ckpt.meta)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    body.extend_from_slice(&meta);

    body.extend_from_slice(&(ckpt.tensors.len() as u64).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        body.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        body.extend_from_slice(name_bytes);
        body.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }

    // Checksum first; nothing else is parsed from a corrupt file.
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }

    let meta_len = cur.u64()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let count = cur.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, tensor));
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}
