use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::volume::{ImageSlice, NormRecord, PatientVolume, Plane};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which slice indices along the fixed axis to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    All,
    /// The `k` centermost indices, clipped to the axis length.
    Central(usize),
}

impl RangePolicy {
    pub fn indices(self, depth: usize) -> std::ops::Range<usize> {
        match self {
            RangePolicy::All => 0..depth,
            RangePolicy::Central(k) => {
                let k = k.min(depth);
                let start = (depth - k) / 2;
                start..start + k
            }
        }
    }
}

pub fn extract_slices(vol: &PatientVolume, plane: Plane, policy: RangePolicy) -> Vec<ImageSlice> {
    let axis = plane.fixed_axis();
    policy
        .indices(vol.voxels.len_of(Axis(axis)))
        .map(|i| ImageSlice {
            pixels: vol.voxels.index_axis(Axis(axis), i).to_owned(),
            plane,
            patient_id: vol.patient_id.clone(),
            label: vol.label.clone(),
            index: i,
            norm: vol.norm,
        })
        .collect()
}

/// Reassembles a volume from a complete, ordered set of one plane's slices.
pub fn restack(slices: &[ImageSlice]) -> Result<Array3<f32>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("no slices to restack".into()))?;
    let axis = first.plane.fixed_axis();
    let views: Vec<_> = slices.iter().map(|s| s.pixels.view()).collect();
    ndarray::stack(Axis(axis), &views).map_err(|e| Error::shape("restack", e.to_string()))
}

fn min_max<'a>(values: impl Iterator<Item = &'a f32>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    })
}

fn rescale(v: f32, lo: f64, hi: f64) -> f32 {
    if hi > lo {
        ((v as f64 - lo) / (hi - lo)) as f32
    } else {
        0.0
    }
}

/// Per-volume min-max scaling to `[0, 1]`. A constant volume maps to zeros.
/// The first normalization's original range is kept in `norm`.
pub fn normalize_volume(vol: &PatientVolume) -> PatientVolume {
    let (lo, hi) = min_max(vol.voxels.iter());
    let mut out = vol.clone();
    out.voxels.mapv_inplace(|v| rescale(v, lo, hi));
    out.norm = Some(vol.norm.unwrap_or(NormRecord { min: lo, max: hi }));
    out
}

pub fn normalize_slice(slice: &ImageSlice) -> ImageSlice {
    let (lo, hi) = min_max(slice.pixels.iter());
    let mut out = slice.clone();
    out.pixels.mapv_inplace(|v| rescale(v, lo, hi));
    out.norm = Some(slice.norm.unwrap_or(NormRecord { min: lo, max: hi }));
    out
}

pub fn padded_size(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads the last two axes at the bottom/right up to a multiple.
pub fn pad_reflect(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || multiple == 0 {
        return Err(Error::shape(
            "pad_reflect",
            format!("{:?} to multiple {multiple}", s),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (padded_size(h, multiple), padded_size(w, multiple));
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let lead: usize = s[..s.len() - 2].iter().product();
    let mut out = Vec::with_capacity(lead * ph * pw);
    for p in 0..lead {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                out.push(plane[sy * w + reflect(x as isize, w)]);
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ph;
    shape[n - 1] = pw;
    Tensor::new(shape, out)
}

/// Crops the last two axes to the top-left `h x w` block.
pub fn crop_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    let (ph, pw) = (s[s.len() - 2], s[s.len() - 1]);
    if h > ph || w > pw {
        return Err(Error::shape("crop_to", format!("{h}x{w} from {:?}", s)));
    }
    if (h, w) == (ph, pw) {
        return Ok(t.clone());
    }
    let lead: usize = s[..s.len() - 2].iter().product();
    let mut out = Vec::with_capacity(lead * h * w);
    for p in 0..lead {
        for y in 0..h {
            let row = p * ph * pw + y * pw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out)
}

#[allow(dead_code)]
pub(crate) fn slice_from_tensor(t: &Tensor) -> Array2<f32> {
    let s = t.shape();
    Array2::from_shape_vec((s[0], s[1]), t.to_f32()).expect("2-D tensor")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: (usize, usize, usize)) -> PatientVolume {
        let v = Array3::from_shape_fn(shape, |(x, y, z)| (x * 10000 + y * 100 + z) as f32);
        PatientVolume::new("P", "clean", v, "mem").unwrap()
    }

    #[test]
    fn sagittal_full_axis() {
        let s = extract_slices(
            &vol((40, 50, 60)),
            Plane::Sagittal,
            RangePolicy::Central(40),
        );
        assert_eq!(s.len(), 40);
        assert_eq!(s[0].pixels.dim(), (50, 60));
    }

    #[test]
    fn central_policy_clips_and_centers() {
        let v = vol((8, 8, 60));
        assert_eq!(
            extract_slices(&v, Plane::Transversal, RangePolicy::Central(100)).len(),
            60
        );
        let idx: Vec<usize> = extract_slices(&v, Plane::Transversal, RangePolicy::Central(10))
            .iter()
            .map(|s| s.index)
            .collect();
        assert_eq!(idx, (25..35).collect::<Vec<_>>());
    }

    #[test]
    fn plane_shapes_follow_axis_convention() {
        let v = vol((10, 12, 14));
        assert_eq!(
            extract_slices(&v, Plane::Transversal, RangePolicy::All)[0]
                .pixels
                .dim(),
            (10, 12)
        );
        assert_eq!(
            extract_slices(&v, Plane::Coronal, RangePolicy::All)[0]
                .pixels
                .dim(),
            (10, 14)
        );
        assert_eq!(
            extract_slices(&v, Plane::Sagittal, RangePolicy::All)[0]
                .pixels
                .dim(),
            (12, 14)
        );
    }

    #[test]
    fn normalize_cases() {
        let mut v = vol((8, 8, 8));
        v.voxels.fill(10.0);
        v.voxels[[0, 0, 0]] = 30.0;
        v.voxels[[1, 0, 0]] = 20.0;
        let n = normalize_volume(&v);
        assert_eq!(n.voxels[[1, 0, 0]], 0.5);
        assert_eq!(
            n.norm,
            Some(NormRecord {
                min: 10.0,
                max: 30.0
            })
        );

        v.voxels.fill(7.0);
        let c = normalize_volume(&v);
        assert!(c.voxels.iter().all(|&x| x == 0.0));
        assert_eq!(c.norm.unwrap().min, c.norm.unwrap().max);

        let mut unit = vol((8, 8, 8));
        unit.voxels.mapv_inplace(|x| (x / 70707.0).min(1.0));
        unit.voxels[[0, 0, 0]] = 0.0;
        unit.voxels[[7, 7, 7]] = 1.0;
        assert_eq!(normalize_volume(&unit).voxels, unit.voxels);
    }

    #[test]
    fn reflect_pad_and_crop() {
        let t = Tensor::from_fn([3, 3], |i| i as f64);
        let p = pad_reflect(&t, 4).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // row 3 mirrors row 1, column 3 mirrors column 1
        assert_eq!(&p.data()[12..16], &[3.0, 4.0, 5.0, 4.0]);
        assert_eq!(crop_to(&p, 3, 3).unwrap(), t);
    }
}
