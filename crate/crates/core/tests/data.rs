use dima_core::data::raw::{load_volume as load_raw, save_volume};
use dima_core::data::*;
use dima_core::error::Error;
use dima_core::{Result, RngStream};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn volume(seed: u64, dims: (usize, usize, usize), lo: f32, hi: f32) -> PatientVolume {
    let mut rng = RngStream::new(seed, 0);
    let vox = Array3::from_shape_fn(dims, |_| rng.uniform_range(lo as f64, hi as f64) as f32);
    PatientVolume::new(format!("P{seed}"), CLEAN_LABEL, vox, "mem").unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("S{i:03}")).collect()
}

/// Smooth texture so that correlation peaks sharply at the true shift.
fn textured(seed: u64, n: usize) -> Array2<f32> {
    let mut rng = RngStream::new(seed, 4);
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.uniform_range(0.1, 0.6),
                rng.uniform_range(0.1, 0.6),
                rng.uniform_range(0.0, 6.3),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let v: f64 = waves
            .iter()
            .map(|(a, b, p)| (a * y as f64 + b * x as f64 + p).sin())
            .sum();
        (0.5 + v / 12.0) as f32
    })
}

fn shifted(img: &Array2<f32>, dy: isize, dx: isize) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img[(sy as usize, sx as usize)]
        } else {
            0.0
        }
    })
}

proptest! {
    #[test]
    fn split_sets_never_share_patients(seed in any::<u64>(), a in 0usize..6, b in 0usize..6, c in 0usize..6, d in 0usize..6, e in 0usize..6, extra in 0usize..5) {
        let counts = SplitCounts { ddpm_train: a, ddpm_val: b, unet_train: c, unet_val: d, test: e };
        let plan = split_by_patient(&ids(counts.total() + extra), counts, seed).unwrap();
        prop_assert!(plan.is_disjoint());
        for role in SplitRole::ALL {
            prop_assert_eq!(plan.get(role).len(), counts.get(role));
        }
    }

    #[test]
    fn normalize_is_idempotent(seed in any::<u64>(), lo in -100.0f32..0.0, span in 0.0f32..200.0) {
        let v = volume(seed, (8, 9, 10), lo, lo + span);
        let once = normalize_volume(&v);
        let twice = normalize_volume(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.voxels.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn restacking_slices_is_lossless(seed in any::<u64>(), x in 8usize..12, y in 8usize..12, z in 8usize..12) {
        let v = volume(seed, (x, y, z), 0.0, 1.0);
        for plane in Plane::ALL {
            let s = extract_slices(&v, plane, RangePolicy::All);
            prop_assert_eq!(restack(&s).unwrap(), v.voxels.clone());
        }
    }

    #[test]
    fn self_registration_is_zero(seed in any::<u64>(), max_shift in 0usize..4) {
        let mut rng = RngStream::new(seed, 0);
        let img = ImageSlice::standalone(Array2::from_shape_fn((12, 12), |_| rng.uniform() as f32));
        let r = register_rigid(&img, &img, max_shift).unwrap();
        prop_assert_eq!(r.shift, (0, 0));
    }

    #[test]
    fn pairs_reject_mismatched_sites(p1 in 0u8..3, p2 in 0u8..3, i1 in 0usize..3, i2 in 0usize..3, pl1 in 0usize..3, pl2 in 0usize..3) {
        let make = |p: u8, i: usize, pl: usize| ImageSlice {
            patient_id: format!("P{p}"),
            index: i,
            plane: Plane::ALL[pl],
            ..ImageSlice::standalone(Array2::zeros((4, 4)))
        };
        let (a, b) = (make(p1, i1, pl1), make(p2, i2, pl2));
        let ok = PairedSample::new(a, b, PairProvenance::Real).is_ok();
        prop_assert_eq!(ok, p1 == p2 && i1 == i2 && pl1 == pl2);
    }
}

#[test]
fn full_scale_split_sizes() {
    let counts = SplitCounts {
        ddpm_train: 30,
        ddpm_val: 15,
        unet_train: 30,
        unet_val: 15,
        test: 54,
    };
    let plan = split_by_patient(&ids(144), counts, 3).unwrap();
    assert!(plan.is_disjoint());
    assert_eq!(plan, split_by_patient(&ids(144), counts, 3).unwrap());
    assert!(split_by_patient(&ids(143), counts, 3).is_err());
}

#[test]
fn split_fuzz_thousand_seeds() {
    let counts = SplitCounts {
        ddpm_train: 7,
        ddpm_val: 3,
        unet_train: 7,
        unet_val: 3,
        test: 10,
    };
    for seed in 0..1000 {
        assert!(split_by_patient(&ids(32), counts, seed)
            .unwrap()
            .is_disjoint());
    }
}

#[test]
fn normalize_examples() {
    let mut vox = Array3::from_elem((8, 8, 8), 10.0f32);
    vox[(0, 0, 0)] = 30.0;
    vox[(1, 0, 0)] = 20.0;
    let v = normalize_volume(&PatientVolume::new("p", "clean", vox, "m").unwrap());
    assert_eq!(v.voxels[(1, 0, 0)], 0.5);
    let c = normalize_volume(
        &PatientVolume::new("p", "clean", Array3::from_elem((8, 8, 8), 4.0f32), "m").unwrap(),
    );
    assert!(c.voxels.iter().all(|&x| x == 0.0));
    let n = c.norm.unwrap();
    assert_eq!(n.min, n.max);
}

#[test]
fn registration_recovers_shift_under_noise() {
    let mut hits = 0;
    for trial in 0..100u64 {
        let fixed = textured(trial, 32);
        let mut rng = RngStream::new(trial, 9);
        let noisy = shifted(&fixed, -2, 3).mapv(|v| v + 0.05 * rng.normal() as f32);
        let r = register_rigid(
            &ImageSlice::standalone(noisy),
            &ImageSlice::standalone(fixed),
            5,
        )
        .unwrap();
        if r.shift == (2, -3) {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn registration_exact_copy() {
    let fixed = textured(1, 24);
    let moving = shifted(&fixed, -2, 3);
    let r = register_rigid(
        &ImageSlice::standalone(moving),
        &ImageSlice::standalone(fixed),
        5,
    )
    .unwrap();
    assert_eq!(r.shift, (2, -3));
    assert!((r.ncc - 1.0).abs() < 1e-9);
}

struct NoiseSim;

impl Simulator for NoiseSim {
    fn simulate(
        &self,
        clean: &ImageSlice,
        _replicate: usize,
        rng: &mut RngStream,
    ) -> Result<ImageSlice> {
        Ok(ImageSlice {
            pixels: clean.pixels.mapv(|v| v + 0.01 * rng.normal() as f32),
            ..clean.clone()
        })
    }
}

struct FailingSim;

impl Simulator for FailingSim {
    fn simulate(
        &self,
        _clean: &ImageSlice,
        _replicate: usize,
        _rng: &mut RngStream,
    ) -> Result<ImageSlice> {
        Err(Error::InvalidArgument("boom".into()))
    }
}

#[test]
fn build_pairs_counts_reproducibility_and_stochasticity() {
    let v = volume(5, (8, 8, 100), 0.0, 1.0);
    let clean = extract_slices(&v, Plane::Transversal, RangePolicy::All);
    let rng = RngStream::new(17, 2);
    let pairs = build_pairs(&clean, &NoiseSim, 2, &rng).unwrap();
    assert_eq!(pairs.len(), 200);
    assert_eq!(pairs, build_pairs(&clean, &NoiseSim, 2, &rng).unwrap());
    let distinct = pairs
        .chunks(2)
        .filter(|p| {
            let d: f32 = p[0]
                .degraded()
                .pixels
                .iter()
                .zip(p[1].degraded().pixels.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            d > 0.0
        })
        .count();
    assert!(distinct >= 99, "{distinct}/100");
    assert!(pairs
        .iter()
        .all(|p| p.provenance == PairProvenance::DiffusionSimulated));

    let err = build_pairs(&clean[..1], &FailingSim, 2, &rng).unwrap_err();
    assert!(matches!(err, Error::Simulation { ref patient, index: 0, .. } if patient == "P5"));
}

#[test]
fn raw_round_trip_and_detection() {
    let dir = tempfile::tempdir().unwrap();
    let v = volume(2, (8, 9, 10), -3.0, 7.0);
    let p = dir.path().join("v.raw");
    save_volume(&p, &v).unwrap();
    assert_eq!(load_raw(&p).unwrap().voxels, v.voxels);
    assert_eq!(load_volume(&p).unwrap().voxels, v.voxels);
}

#[test]
fn nifti_reader_synthetic_cube() {
    let dir = tempfile::tempdir().unwrap();
    let vox = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| (x + 4 * y + 16 * z) as f32);
    let path = dir.path().join("cube.nii");
    nifti::write_nifti(&path, &vox).unwrap();
    assert_eq!(nifti::read_nifti(&path).unwrap(), vox);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[344] = b'x';
    assert!(nifti::parse_nifti(&bytes).is_err());
}

#[test]
fn padding_round_trip() {
    let t = dima_core::Tensor::from_fn([10, 13], |i| i as f64);
    let p = pad_reflect(&t, 8).unwrap();
    assert_eq!(p.shape(), &[16, 16]);
    assert_eq!(crop_to(&p, 10, 13).unwrap(), t);
}
