//! Minimal single-file NIfTI-1 (`.nii`, uncompressed).
//!
//! Supported datatypes: uint8 (2), int16 (4), float32 (16). `scl_slope` and
//! `scl_inter` are applied when the slope is non-zero. Orientation metadata is
//! ignored; axes are taken as stored.

use std::path::Path;

use ndarray::Array3;

use super::bad_format;
use crate::error::Result;

pub const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn u32(&self, off: usize) -> u32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => u32::from_le_bytes(b),
            Endian::Big => u32::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.u32(off))
    }
}

pub fn read_nifti(path: &Path) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path)?;
    parse_nifti(&bytes).map_err(|detail| bad_format(path, detail))
}

pub fn parse_nifti(bytes: &[u8]) -> std::result::Result<Array3<f32>, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        ));
    }
    let endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        _ => return Err("sizeof_hdr is not 348".into()),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(format!("bad magic {:?}", &bytes[344..348]));
    }
    let r = Reader { bytes, endian };
    let ndim = r.i16(40);
    let dims: Vec<i16> = (1..=7).map(|i| r.i16(40 + 2 * i)).collect();
    if !(3..=7).contains(&ndim) || dims[..3].iter().any(|&d| d < 1) {
        return Err(format!("unsupported dim header {ndim} {:?}", dims));
    }
    if dims[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(format!(
            "only single 3-D volumes are supported, dims {:?}",
            dims
        ));
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let offset = r.f32(108);
    if offset.is_nan() || offset < HEADER_SIZE as f32 {
        return Err(format!("invalid vox_offset {offset}"));
    }
    let offset = offset as usize;
    let n = nx * ny * nz;
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(format!(
            "truncated data: need {end} bytes, have {}",
            bytes.len()
        ));
    }
    let data = &bytes[offset..end];
    let raw: Vec<f32> = match datatype {
        DT_UINT8 => data.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..n)
            .map(|i| r_i16_at(data, i * 2, endian) as f32)
            .collect(),
        _ => (0..n)
            .map(|i| f32::from_bits(r_u32_at(data, i * 4, endian)))
            .collect(),
    };
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scaled: Vec<f32> = if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    // x varies fastest on disk
    Ok(Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        scaled[x + nx * (y + ny * z)]
    }))
}

fn r_i16_at(data: &[u8], off: usize, e: Endian) -> i16 {
    let b = [data[off], data[off + 1]];
    match e {
        Endian::Little => i16::from_le_bytes(b),
        Endian::Big => i16::from_be_bytes(b),
    }
}

fn r_u32_at(data: &[u8], off: usize, e: Endian) -> u32 {
    let b: [u8; 4] = data[off..off + 4].try_into().unwrap();
    match e {
        Endian::Little => u32::from_le_bytes(b),
        Endian::Big => u32::from_be_bytes(b),
    }
}

/// Encodes a little-endian float32 NIfTI-1 file image.
pub fn encode_nifti_f32(voxels: &Array3<f32>) -> Vec<u8> {
    let (nx, ny, nz) = voxels.dim();
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    for i in 0..8 {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                h.extend_from_slice(&voxels[[x, y, z]].to_le_bytes());
            }
        }
    }
    h
}

pub fn write_nifti(path: &Path, voxels: &Array3<f32>) -> Result<()> {
    std::fs::write(path, encode_nifti_f32(voxels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(datatype: i16, dims: [i16; 3]) -> Vec<u8> {
        let mut v = encode_nifti_f32(&Array3::zeros((1, 1, 1)));
        v.truncate(DATA_OFFSET);
        for (i, d) in dims.iter().enumerate() {
            v[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        v[70..72].copy_from_slice(&datatype.to_le_bytes());
        v
    }

    #[test]
    fn reads_float_cube() {
        let vol = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| (x + 10 * y + 100 * z) as f32);
        let parsed = parse_nifti(&encode_nifti_f32(&vol)).unwrap();
        assert_eq!(parsed.dim(), (4, 4, 4));
        assert_eq!(parsed, vol);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_nifti_f32(&Array3::zeros((4, 4, 4)));
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(parse_nifti(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn rejects_truncation_and_unknown_types() {
        let mut bytes = encode_nifti_f32(&Array3::zeros((4, 4, 4)));
        bytes.truncate(bytes.len() - 3);
        assert!(parse_nifti(&bytes).unwrap_err().contains("truncated"));
        let mut h = header(64, [2, 2, 2]);
        h.extend_from_slice(&[0u8; 64]);
        assert!(parse_nifti(&h).unwrap_err().contains("datatype"));
    }

    #[test]
    fn int16_with_scaling() {
        let mut h = header(DT_INT16, [2, 1, 1]);
        h[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        h[116..120].copy_from_slice(&10.0f32.to_le_bytes());
        h.extend_from_slice(&(-4i16).to_le_bytes());
        h.extend_from_slice(&6i16.to_le_bytes());
        let v = parse_nifti(&h).unwrap();
        assert_eq!(v.iter().copied().collect::<Vec<_>>(), vec![8.0, 13.0]);
    }

    #[test]
    fn uint8_without_slope() {
        let mut h = header(DT_UINT8, [1, 1, 3]);
        h[112..116].copy_from_slice(&0.0f32.to_le_bytes());
        h.extend_from_slice(&[1, 2, 255]);
        let v = parse_nifti(&h).unwrap();
        assert_eq!(v.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 255.0]);
    }
}
