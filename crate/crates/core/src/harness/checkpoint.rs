//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DVNCCKPT"
//! version    u32
//! count      u32
//! count × {
//!   name_len u16, name bytes (UTF-8),
//!   rank u8, dims u32 × rank,
//!   payload f32 × product(dims), row-major
//! }
//! rng        u64 seed, u64 steps taken
//! config     u32 length, JSON bytes
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`;
//! [`Checkpoint`] keeps them already rounded so save/load/save is exact.

use super::config::TrainConfig;
use super::HarnessError;
use crate::error::Error;
use crate::rim::RimParams;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DVNCCKPT";
pub const VERSION: u32 = 1;

/// Seed and position of the training data stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    arrays: Vec<(String, Tensor)>,
    pub rng: RngState,
}

fn round_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

fn format_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Model(Error::Format(msg.into()))
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: &RimParams, rng: RngState) -> Self {
        let arrays = params.named().into_iter().map(|(n, t)| (n, round_f32(t))).collect();
        Self { config, arrays, rng }
    }

    pub fn arrays(&self) -> &[(String, Tensor)] {
        &self.arrays
    }

    pub fn params(&self) -> Result<RimParams, HarnessError> {
        let map: BTreeMap<String, Tensor> = self.arrays.iter().cloned().collect();
        if map.len() != self.arrays.len() {
            return Err(format_err("duplicate array names"));
        }
        Ok(RimParams::from_named(&self.config.model, &map)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            let name_len = u16::try_from(name.len()).map_err(|_| format_err(format!("array name {name} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.rank()).map_err(|_| format_err("rank too large"))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.step.to_le_bytes());
        let config = serde_json::to_vec(&self.config).map_err(HarnessError::json("checkpoint config"))?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("array name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| format_err("array too large"))?;
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| format_err("array too large"))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        let rng = RngState { seed: r.u64()?, step: r.u64()? };
        let config_len = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(config_len)?).map_err(HarnessError::json("checkpoint config"))?;
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes after checkpoint"));
        }
        let ckpt = Self { config: config.resolve()?, arrays, rng };
        ckpt.params()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_bytes()?).map_err(HarnessError::io(format!("writing checkpoint {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(format!("reading checkpoint {}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, HarnessError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
