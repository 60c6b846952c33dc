//! Binary layout (all integers little-endian):
//!
//! ```text
//! "DIMACKPT"  u32 version
//! u32 len, JSON {config, schedule, provenance}
//! u32 tensor count
//! per tensor: u32 len, UTF-8 name, u32 ndim, u64 dims…, u64 count, f32 values…
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::unet::{UNet, UNetConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub objective: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: Option<f64>,
    pub train_patients: Vec<String>,
    pub validation_patients: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: UNetConfig,
    pub schedule: Option<ScheduleConfig>,
    pub provenance: Provenance,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    schedule: Option<ScheduleConfig>,
    provenance: Provenance,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ModelCheckpoint {
    /// Values are stored as `f32`; parameters are rounded on construction so
    /// a save/load cycle is exact.
    pub fn new(
        config: UNetConfig,
        schedule: Option<ScheduleConfig>,
        provenance: Provenance,
        params: &ParamStore,
    ) -> Result<Self> {
        config.check_params(params)?;
        Ok(ModelCheckpoint {
            config,
            schedule,
            provenance,
            params: params.quantized(),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config,
            schedule: self.schedule,
            provenance: self.provenance.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.to_f32() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = r.u64()? as usize;
            if n != shape.iter().product::<usize>() {
                return Err(format!(
                    "tensor `{name}` count {n} does not match shape {shape:?}"
                ));
            }
            let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params
                .push(name, Tensor::new(shape, data).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        header
            .config
            .check_params(&params)
            .map_err(|e| e.to_string())?;
        if header.config.parameter_count() != params.count() {
            return Err("parameter count does not match config".into());
        }
        Ok(ModelCheckpoint {
            config: header.config,
            schedule: header.schedule,
            provenance: header.provenance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|d| Error::format(path, d))
    }

    pub fn to_unet(&self) -> Result<UNet> {
        UNet::from_params(self.config, self.params.clone())
    }
}
