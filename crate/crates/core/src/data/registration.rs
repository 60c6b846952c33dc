use ndarray::Array2;

use super::volume::ImageSlice;
use crate::error::{Error, Result};

const MIN_OVERLAP: f64 = 0.25;
const TIE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub slice: ImageSlice,
    /// Applied translation: `shifted(y, x) = moving(y - dy, x - dx)`.
    pub shift: (isize, isize),
    pub ncc: f64,
}

fn ncc_at(moving: &Array2<f32>, fixed: &Array2<f32>, dy: isize, dx: isize) -> Option<f64> {
    let (h, w) = fixed.dim();
    let (hi, wi) = (h as isize, w as isize);
    let y0 = dy.max(0);
    let y1 = (hi + dy).min(hi);
    let x0 = dx.max(0);
    let x1 = (wi + dx).min(wi);
    if y1 <= y0 || x1 <= x0 {
        return None;
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    if n < MIN_OVERLAP * (h * w) as f64 {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = fixed[[y as usize, x as usize]] as f64;
            let b = moving[[(y - dy) as usize, (x - dx) as usize]] as f64;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    let cov = sab - sa * sb / n;
    let denom = (va * vb).sqrt();
    Some(if denom > 1e-12 { cov / denom } else { 0.0 })
}

pub fn shift_image(img: &Array2<f32>, dy: isize, dx: isize) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img[[sy as usize, sx as usize]]
        } else {
            0.0
        }
    })
}

/// Exhaustive integer translation search maximizing normalized
/// cross-correlation on the overlap. Ties go to the smallest shift norm,
/// then lexicographic `(dy, dx)`.
pub fn register_rigid(
    moving: &ImageSlice,
    fixed: &ImageSlice,
    max_shift: usize,
) -> Result<Registration> {
    if moving.pixels.dim() != fixed.pixels.dim() {
        return Err(Error::shape(
            "register_rigid",
            format!("{:?} vs {:?}", moving.pixels.dim(), fixed.pixels.dim()),
        ));
    }
    let m = max_shift as isize;
    let mut best: Option<((isize, isize), f64)> = None;
    for dy in -m..=m {
        for dx in -m..=m {
            let Some(score) = ncc_at(&moving.pixels, &fixed.pixels, dy, dx) else {
                continue;
            };
            let better = match best {
                None => true,
                Some(((by, bx), bs)) => {
                    if score > bs + TIE_EPS {
                        true
                    } else if score >= bs - TIE_EPS {
                        let (n, bn) = (dy * dy + dx * dx, by * by + bx * bx);
                        n < bn || (n == bn && (dy, dx) < (by, bx))
                    } else {
                        false
                    }
                }
            };
            if better {
                best = Some(((dy, dx), score));
            }
        }
    }
    let ((dy, dx), ncc) =
        best.ok_or_else(|| Error::InvalidArgument("no admissible shift".into()))?;
    let mut slice = moving.clone();
    slice.pixels = shift_image(&moving.pixels, dy, dx);
    Ok(Registration {
        slice,
        shift: (dy, dx),
        ncc,
    })
}
