use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{PatientVolume, CLEAN_LABEL};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;

/// Synthetic corpus: soft-edged ellipsoid "anatomy" for clean scans and
/// ghosted, blurred copies for motion-affected scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Volume shape `[x, y, z]`.
    pub size: [usize; 3],
    pub corpus_size: usize,
    /// Inclusive range of ellipsoid counts per patient.
    pub ellipses: [usize; 2],
    /// Width of the soft edge in normalized radius units.
    pub edge_width: f64,
    pub ghost_count: usize,
    /// Replica spacing along y, in voxels.
    pub ghost_spacing: usize,
    pub ghost_amplitude: f64,
    /// Relative per-replica amplitude jitter, uniform in `±jitter`.
    pub amplitude_jitter: f64,
    /// In-plane Gaussian blur standard deviation in voxels; 0 disables it.
    pub blur_sigma: f64,
    pub motion_scans: usize,
    /// Falls back to the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [64, 64, 8],
            corpus_size: 50,
            ellipses: [3, 6],
            edge_width: 0.04,
            ghost_count: 2,
            ghost_spacing: 8,
            ghost_amplitude: 0.3,
            amplitude_jitter: 0.2,
            blur_sigma: 0.8,
            motion_scans: 1,
            seed: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let amp_hi = self.ghost_amplitude * (1.0 + self.amplitude_jitter);
        let err = |m: &str| Err(Error::InvalidArgument(format!("phantom: {m}")));
        if self.size.iter().any(|&d| d < 8) {
            return err("every dimension must be at least 8");
        }
        if !(self.ghost_amplitude > 0.0 && amp_hi < 1.0)
            || !(0.0..1.0).contains(&self.amplitude_jitter)
        {
            return err("ghost amplitude (with jitter) must lie in (0, 1)");
        }
        if self.ghost_spacing == 0 {
            return err("ghost spacing must be at least 1 voxel");
        }
        if self.ellipses[0] == 0 || self.ellipses[0] > self.ellipses[1] {
            return err("ellipse count range must be 1 <= min <= max");
        }
        if self.edge_width.is_nan() || self.edge_width <= 0.0 || self.blur_sigma < 0.0 {
            return err("edge width must be positive and blur width non-negative");
        }
        Ok(())
    }
}

/// Signed offsets along y of the replicas: `+s, −s, +2s, −2s, …`.
pub fn ghost_offsets(count: usize, spacing: usize) -> Vec<isize> {
    (0..count)
        .map(|j| {
            let m = ((j / 2 + 1) * spacing) as isize;
            if j % 2 == 0 {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Adds amplitude-weighted copies of `vol` shifted along y with circular
/// wrap. `amplitudes[j]` weights the replica at `ghost_offsets(..)[j]`.
pub fn apply_ghosting(vol: &Array3<f32>, spacing: usize, amplitudes: &[f64]) -> Array3<f32> {
    let mut out = vol.clone();
    let ny = vol.len_of(Axis(1)) as isize;
    for (off, &a) in ghost_offsets(amplitudes.len(), spacing)
        .into_iter()
        .zip(amplitudes)
    {
        if a == 0.0 {
            continue;
        }
        for ((x, y, z), o) in out.indexed_iter_mut() {
            let sy = (y as isize - off).rem_euclid(ny) as usize;
            *o += (a * vol[[x, sy, z]] as f64) as f32;
        }
    }
    out
}

fn blur_axis(vol: &Array3<f32>, axis: usize, taps: &[f64]) -> Array3<f32> {
    let r = (taps.len() / 2) as isize;
    let n = vol.len_of(Axis(axis)) as isize;
    Array3::from_shape_fn(vol.dim(), |idx| {
        let mut p = [idx.0, idx.1, idx.2];
        let c = p[axis] as isize;
        let mut s = 0.0;
        for (k, &t) in taps.iter().enumerate() {
            p[axis] = (c + k as isize - r).clamp(0, n - 1) as usize;
            s += t * vol[p] as f64;
        }
        s as f32
    })
}

/// In-plane (x and y) Gaussian blur with edge clamping; `sigma = 0` is the
/// identity.
pub fn gaussian_blur(vol: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return vol.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let taps: Vec<f64> = w.iter().map(|v| v / total).collect();
    blur_axis(&blur_axis(vol, 0, &taps), 1, &taps)
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
    intensity: f64,
}

fn draw_anatomy(spec: &PhantomSpec, rng: &mut RngStream) -> Array3<f32> {
    let count = rng.int_inclusive(spec.ellipses[0], spec.ellipses[1]);
    let mut shapes = vec![Ellipsoid {
        center: [
            rng.uniform_range(-0.05, 0.05),
            rng.uniform_range(-0.05, 0.05),
            0.0,
        ],
        axes: [
            rng.uniform_range(0.6, 0.8),
            rng.uniform_range(0.7, 0.85),
            rng.uniform_range(1.2, 2.0),
        ],
        angle: rng.uniform_range(-0.3, 0.3),
        intensity: rng.uniform_range(0.6, 0.8),
    }];
    for _ in 1..count {
        shapes.push(Ellipsoid {
            center: [
                rng.uniform_range(-0.4, 0.4),
                rng.uniform_range(-0.45, 0.45),
                rng.uniform_range(-0.5, 0.5),
            ],
            axes: [
                rng.uniform_range(0.08, 0.3),
                rng.uniform_range(0.08, 0.3),
                rng.uniform_range(0.6, 1.5),
            ],
            angle: rng.uniform_range(0.0, std::f64::consts::PI),
            intensity: rng.uniform_range(-0.4, 0.4),
        });
    }
    let [nx, ny, nz] = spec.size;
    let norm = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        let p = [norm(x, nx), norm(y, ny), norm(z, nz)];
        let v: f64 = shapes
            .iter()
            .map(|e| {
                let (dx, dy, dz) = (p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]);
                let (s, c) = e.angle.sin_cos();
                let (u, w) = (c * dx + s * dy, -s * dx + c * dy);
                let r =
                    ((u / e.axes[0]).powi(2) + (w / e.axes[1]).powi(2) + (dz / e.axes[2]).powi(2))
                        .sqrt();
                e.intensity / (1.0 + ((r - 1.0) / spec.edge_width).exp())
            })
            .sum();
        v.max(0.0) as f32
    })
}

/// One generated scan and, for degraded scans, its ground-truth artifact
/// parameters.
#[derive(Clone, Debug)]
pub struct PhantomScan {
    pub volume: PatientVolume,
    pub degradation: Option<Value>,
}

/// Generates `corpus_size` patients, each with one clean scan followed by
/// `motion_scans` degraded scans. Patient `i` uses stream `rng.split(i)`.
pub fn generate_phantom(spec: &PhantomSpec, rng: &RngStream) -> Result<Vec<Vec<PhantomScan>>> {
    spec.validate()?;
    par::try_map_range(spec.corpus_size, |i| {
        let mut r = rng.split(i as u64);
        let id = format!("P{i:03}");
        let clean = draw_anatomy(spec, &mut r);
        let mut scans = vec![PhantomScan {
            volume: PatientVolume::new(
                &id,
                CLEAN_LABEL,
                clean.clone(),
                format!("{id}_{CLEAN_LABEL}.raw"),
            )?,
            degradation: None,
        }];
        for m in 1..=spec.motion_scans {
            let amps: Vec<f64> = (0..spec.ghost_count)
                .map(|_| {
                    spec.ghost_amplitude
                        * (1.0 + spec.amplitude_jitter * r.uniform_range(-1.0, 1.0))
                })
                .collect();
            let degraded = gaussian_blur(
                &apply_ghosting(&clean, spec.ghost_spacing, &amps),
                spec.blur_sigma,
            );
            let label = format!("motion{m}");
            scans.push(PhantomScan {
                volume: PatientVolume::new(&id, &label, degraded, format!("{id}_{label}.raw"))?,
                degradation: Some(json!({
                    "ghost_offsets": ghost_offsets(spec.ghost_count, spec.ghost_spacing),
                    "ghost_amplitudes": amps,
                    "blur_sigma": spec.blur_sigma,
                })),
            });
        }
        Ok(scans)
    })
}
