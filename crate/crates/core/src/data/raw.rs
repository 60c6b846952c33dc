//! Raw tensor files: 8-byte magic, u32 little-endian header length, a UTF-8
//! JSON header `{shape, dtype: "f32le", meta}`, then little-endian f32 data.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bad_format;
use super::volume::{NormRecord, PatientVolume};
use crate::error::Result;

pub const RAW_MAGIC: &[u8; 8] = b"DIMARAW1";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    #[serde(default)]
    meta: Value,
}

impl RawTensor {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            shape: self.shape.clone(),
            dtype: DTYPE.to_string(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<RawTensor, String> {
        if bytes.len() < 12 || &bytes[..8] != RAW_MAGIC {
            return Err("bad magic".into());
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format!("header: {e}"))?;
        if header.dtype != DTYPE {
            return Err(format!("unsupported dtype {}", header.dtype));
        }
        let n: usize = header.shape.iter().product();
        let data = &bytes[12 + hlen..];
        if data.len() != 4 * n {
            return Err(format!(
                "expected {} data bytes, found {}",
                4 * n,
                data.len()
            ));
        }
        let data = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(RawTensor {
            shape: header.shape,
            data,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RawTensor> {
        let bytes = std::fs::read(path)?;
        RawTensor::decode(&bytes).map_err(|d| bad_format(path, d))
    }
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    patient_id: String,
    label: String,
    #[serde(default)]
    norm: Option<NormRecord>,
}

pub fn save_volume(path: &Path, vol: &PatientVolume) -> Result<()> {
    let meta = serde_json::to_value(VolumeMeta {
        patient_id: vol.patient_id.clone(),
        label: vol.label.clone(),
        norm: vol.norm,
    })?;
    let data = vol.voxels.as_standard_layout().iter().copied().collect();
    RawTensor {
        shape: vol.voxels.shape().to_vec(),
        data,
        meta,
    }
    .save(path)
}

pub fn load_volume(path: &Path) -> Result<PatientVolume> {
    let raw = RawTensor::load(path)?;
    if raw.shape.len() != 3 {
        return Err(bad_format(
            path,
            format!("expected a 3-D volume, shape {:?}", raw.shape),
        ));
    }
    let meta: VolumeMeta = serde_json::from_value(raw.meta).unwrap_or(VolumeMeta {
        patient_id: path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("volume")
            .to_string(),
        label: super::CLEAN_LABEL.to_string(),
        norm: None,
    });
    let voxels = Array3::from_shape_vec((raw.shape[0], raw.shape[1], raw.shape[2]), raw.data)
        .map_err(|e| bad_format(path, e.to_string()))?;
    let mut vol = PatientVolume::new(meta.patient_id, meta.label, voxels, path)?;
    vol.norm = meta.norm;
    Ok(vol)
}
