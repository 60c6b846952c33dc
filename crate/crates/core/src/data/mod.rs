//! Volume ingestion, slicing, normalization, alignment, patient-wise
//! splitting and paired-dataset construction.

mod manifest;
pub mod nifti;
mod pairs;
pub mod raw;
mod registration;
mod slices;
mod split;
mod volume;

use std::io::Read;
use std::path::Path;

pub use manifest::{DatasetManifest, PatientEntry, ScanEntry};
pub use pairs::{build_pairs, PairProvenance, PairedSample, Simulator};
pub use registration::{register_rigid, Registration};
pub use slices::{
    crop_to, extract_slices, normalize_slice, normalize_volume, pad_reflect, padded_size, restack,
    RangePolicy,
};
pub use split::{split_by_patient, SplitCounts, SplitPlan, SplitRole};
pub use volume::{ImageSlice, NormRecord, PatientVolume, Plane, CLEAN_LABEL};

use crate::error::{Error, Result};

/// Loads a volume, detecting the raw tensor format by its magic and treating
/// anything else as single-file NIfTI-1.
pub fn load_volume(path: &Path) -> Result<PatientVolume> {
    let mut magic = [0u8; 8];
    let mut f = std::fs::File::open(path)?;
    let n = f.read(&mut magic)?;
    if n == 8 && &magic == raw::RAW_MAGIC {
        raw::load_volume(path)
    } else {
        let voxels = nifti::read_nifti(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("volume")
            .to_string();
        PatientVolume::new(stem, CLEAN_LABEL, voxels, path)
    }
}

/// Loads a volume and stamps the identity recorded in a manifest.
pub fn load_scan(path: &Path, patient_id: &str, label: &str) -> Result<PatientVolume> {
    let mut v = load_volume(path)?;
    v.patient_id = patient_id.to_string();
    v.label = label.to_string();
    Ok(v)
}

pub(crate) fn bad_format(path: &Path, detail: impl Into<String>) -> Error {
    Error::format(path, detail)
}
