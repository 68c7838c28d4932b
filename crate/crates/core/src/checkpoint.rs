//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "CCTCKPT1"                       8-byte magic
//! u32 version                      currently 1
//! u32 len, [u8; len]               config text (key = value lines)
//! u32 count                        number of parameter tensors
//! per tensor:
//!   u16 len, [u8; len]             name
//!   u8 rank, u32 dims[rank]
//!   f32 payload[product(dims)]
//! f32 best_val_accuracy
//! u32 epoch
//! u64 FNV-1a of every preceding byte
//! ```

use std::path::Path;

use thiserror::Error;

use crate::config::{CctConfig, ConfigError};
use crate::model::{LayoutError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CCTCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("{0} trailing bytes after checkpoint checksum")]
    TrailingBytes(usize),
    #[error("checkpoint config is invalid: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint parameters do not match its config: {0}")]
    Layout(#[from] LayoutError),
    #[error("checkpoint was trained with a different architecture")]
    ConfigMismatch,
    #[error("checkpoint field is not valid UTF-8: {what}")]
    Utf8 { what: &'static str },
    #[error("checkpoint field too large: {what}")]
    TooLarge { what: &'static str },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Best-model snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CctConfig,
    pub params: ModelParams<f32>,
    pub best_val_accuracy: f32,
    pub epoch: u32,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_text();
        let config_len = u32::try_from(config.len()).map_err(|_| CheckpointError::TooLarge { what: "config" })?;
        out.extend_from_slice(&config_len.to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let count = u32::try_from(self.params.len()).map_err(|_| CheckpointError::TooLarge { what: "param count" })?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::TooLarge { what: "name" })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::TooLarge { what: "rank" })?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| CheckpointError::TooLarge { what: "dim" })?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.best_val_accuracy.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    /// Parse and validate a checkpoint image.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let config_len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| CheckpointError::Utf8 { what: "config" })?;
        let count = r.u32("parameter count")? as usize;
        let mut params = ModelParams::default();
        for _ in 0..count {
            let name_len = r.u16("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| CheckpointError::Utf8 { what: "parameter name" })?
                .to_string();
            let rank = r.u8("parameter rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("parameter dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::TooLarge { what: "parameter size" })?;
            let bytes = n.checked_mul(4).ok_or(CheckpointError::TooLarge { what: "parameter size" })?;
            let payload = r.take(bytes, "parameter payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data).expect("length checked"));
        }
        let best_val_accuracy = r.f32("best validation accuracy")?;
        let epoch = r.u32("epoch")?;
        let body_end = r.pos;
        let stored = r.u64("checksum")?;
        let computed = fnv1a64(&buf[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
        }
        let config = CctConfig::from_text(config_text)?;
        params.check_layout(&config)?;
        Ok(Checkpoint { config, params, best_val_accuracy, epoch })
    }

    /// Reject checkpoints whose parameter layout differs from `config`.
    pub fn ensure_compatible(&self, config: &CctConfig) -> Result<(), CheckpointError> {
        if !self.config.same_architecture(config) {
            return Err(CheckpointError::ConfigMismatch);
        }
        self.params.check_layout(config)?;
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = ck.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
