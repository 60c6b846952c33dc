use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLEAN_LABEL: &str = "clean";

/// Slicing direction. Axis convention: sagittal fixes X, coronal fixes Y,
/// transversal fixes Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Transversal,
    Coronal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Transversal, Plane::Coronal];

    /// Index of the volume axis held fixed.
    pub fn fixed_axis(self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Transversal => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Transversal => "transversal",
            Plane::Coronal => "coronal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sagittal" => Ok(Plane::Sagittal),
            "transversal" | "axial" => Ok(Plane::Transversal),
            "coronal" => Ok(Plane::Coronal),
            other => Err(Error::InvalidArgument(format!("unknown plane `{other}`"))),
        }
    }
}

/// Original intensity range before min-max scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientVolume {
    pub patient_id: String,
    /// `clean`, `motion1`, `motion2`, ...
    pub label: String,
    /// Voxels indexed `[x, y, z]`.
    pub voxels: Array3<f32>,
    pub source: PathBuf,
    pub norm: Option<NormRecord>,
}

impl PatientVolume {
    pub fn new(
        patient_id: impl Into<String>,
        label: impl Into<String>,
        voxels: Array3<f32>,
        source: impl AsRef<Path>,
    ) -> Result<Self> {
        if voxels.shape().iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!(
                "volume dims {:?} below 8",
                voxels.shape()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume has non-finite voxels".into(),
            ));
        }
        Ok(PatientVolume {
            patient_id: patient_id.into(),
            label: label.into(),
            voxels,
            source: source.as_ref().to_path_buf(),
            norm: None,
        })
    }

    pub fn is_clean(&self) -> bool {
        self.label == CLEAN_LABEL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub pixels: Array2<f32>,
    pub plane: Plane,
    pub patient_id: String,
    pub label: String,
    pub index: usize,
    pub norm: Option<NormRecord>,
}

impl ImageSlice {
    /// A slice with no volume provenance, mostly for tests and tools.
    pub fn standalone(pixels: Array2<f32>) -> Self {
        ImageSlice {
            pixels,
            plane: Plane::Transversal,
            patient_id: String::new(),
            label: CLEAN_LABEL.to_string(),
            index: 0,
            norm: None,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// `[H, W]` tensor of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.pixels.dim();
        Tensor::new([h, w], self.pixels.iter().map(|&v| v as f64).collect()).expect("slice shape")
    }

    /// Same identity, new pixels from an `[H, W]` tensor.
    pub fn with_pixels(&self, t: &Tensor) -> Result<ImageSlice> {
        let (h, w) = self.pixels.dim();
        if t.shape() != [h, w] {
            return Err(Error::shape(
                "with_pixels",
                format!("{:?} for {h}x{w} slice", t.shape()),
            ));
        }
        let pixels = Array2::from_shape_vec((h, w), t.to_f32()).expect("checked shape");
        Ok(ImageSlice {
            pixels,
            ..self.clone()
        })
    }

    pub fn same_site(&self, other: &ImageSlice) -> bool {
        self.patient_id == other.patient_id
            && self.plane == other.plane
            && self.index == other.index
    }
}
