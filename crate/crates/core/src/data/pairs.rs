use serde::{Deserialize, Serialize};

use super::volume::ImageSlice;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairProvenance {
    Real,
    DiffusionSimulated,
    ExternalSimulated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    clean: ImageSlice,
    degraded: ImageSlice,
    pub provenance: PairProvenance,
}

impl PairedSample {
    pub fn new(
        clean: ImageSlice,
        degraded: ImageSlice,
        provenance: PairProvenance,
    ) -> Result<Self> {
        if !clean.same_site(&degraded) {
            return Err(Error::InvalidArgument(format!(
                "pair sides differ: {}/{}/{} vs {}/{}/{}",
                clean.patient_id,
                clean.plane,
                clean.index,
                degraded.patient_id,
                degraded.plane,
                degraded.index
            )));
        }
        if clean.pixels.dim() != degraded.pixels.dim() {
            return Err(Error::shape(
                "PairedSample",
                format!("{:?} vs {:?}", clean.pixels.dim(), degraded.pixels.dim()),
            ));
        }
        Ok(PairedSample {
            clean,
            degraded,
            provenance,
        })
    }

    pub fn clean(&self) -> &ImageSlice {
        &self.clean
    }

    pub fn degraded(&self) -> &ImageSlice {
        &self.degraded
    }
}

/// Anything that turns a clean slice into a degraded one.
pub trait Simulator: Sync {
    fn simulate(
        &self,
        clean: &ImageSlice,
        replicate: usize,
        rng: &mut RngStream,
    ) -> Result<ImageSlice>;
}

/// `k` simulations per clean slice, each on its own stream
/// `rng.split_path([slice, replicate])`. Output is slice-major.
pub fn build_pairs<S: Simulator + ?Sized>(
    clean: &[ImageSlice],
    simulator: &S,
    k: usize,
    rng: &RngStream,
) -> Result<Vec<PairedSample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    par::try_map_range(clean.len() * k, |job| {
        let (i, j) = (job / k, job % k);
        let src = &clean[i];
        let mut stream = rng.split_path(&[i as u64, j as u64]);
        let wrap = |e: Error| Error::Simulation {
            patient: src.patient_id.clone(),
            plane: src.plane.to_string(),
            index: src.index,
            source: Box::new(e),
        };
        let mut out = simulator.simulate(src, j, &mut stream).map_err(wrap)?;
        out.patient_id = src.patient_id.clone();
        out.plane = src.plane;
        out.index = src.index;
        PairedSample::new(src.clone(), out, PairProvenance::DiffusionSimulated).map_err(wrap)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    struct Jitter;

    impl Simulator for Jitter {
        fn simulate(
            &self,
            clean: &ImageSlice,
            _: usize,
            rng: &mut RngStream,
        ) -> Result<ImageSlice> {
            let mut s = clean.clone();
            s.pixels.mapv_inplace(|v| v + rng.normal() as f32 * 0.1);
            s.label = "sim".into();
            Ok(s)
        }
    }

    struct Broken;

    impl Simulator for Broken {
        fn simulate(&self, _: &ImageSlice, _: usize, _: &mut RngStream) -> Result<ImageSlice> {
            Err(Error::InvalidArgument("boom".into()))
        }
    }

    fn slices(n: usize) -> Vec<ImageSlice> {
        (0..n)
            .map(|i| {
                let mut s = ImageSlice::standalone(Array2::from_elem((8, 8), 0.5));
                s.patient_id = "P".into();
                s.index = i;
                s
            })
            .collect()
    }

    #[test]
    fn two_per_slice_and_reproducible() {
        let rng = RngStream::new(1, 2);
        let a = build_pairs(&slices(5), &Jitter, 2, &rng).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, build_pairs(&slices(5), &Jitter, 2, &rng).unwrap());
        assert_ne!(a[0].degraded().pixels, a[1].degraded().pixels);
        assert_eq!(a[3].clean().index, 1);
    }

    #[test]
    fn failure_carries_slice_identity() {
        let err = build_pairs(&slices(3), &Broken, 1, &RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Simulation { index: 0, .. }));
    }

    #[test]
    fn mismatched_sides_rejected() {
        let s = slices(2);
        assert!(PairedSample::new(s[0].clone(), s[1].clone(), PairProvenance::Real).is_err());
    }
}
