//! Image quality metrics and per-slice reports.

pub mod report;
mod ssim;

pub use report::{MetricRecord, MetricsReport, SummaryRow};
pub use ssim::{ssim, ssim_loss, ssim_loss_nodes, ssim_map};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmseConvention {
    /// `‖x − ref‖² / ‖ref‖²`
    #[default]
    ReferenceEnergy,
    /// `‖x − ref‖² / ‖ref − mean(ref)‖²`
    ReferenceVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    pub nmse: NmseConvention,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            nmse: NmseConvention::default(),
        }
    }
}

impl MetricConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn window_1d(&self) -> Vec<f64> {
        let r = (self.window_size as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// Outer product of the 1-D taps as a `[1, 1, k, k]` kernel.
    pub fn window_kernel(&self) -> Tensor {
        let w = self.window_1d();
        let k = self.window_size;
        Tensor::from_fn([1, 1, k, k], |i| w[i / k] * w[i % k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0
            || self.window_size.is_multiple_of(2)
            || self.window_sigma <= 0.0
            || self.data_range <= 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid metric config {self:?}"
            )));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

pub fn nmse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    nmse_with(x, reference, NmseConvention::ReferenceEnergy)
}

pub fn nmse_with(x: &Tensor, reference: &Tensor, convention: NmseConvention) -> Result<f64> {
    same_shape("nmse", x, reference)?;
    let err: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm: f64 = match convention {
        NmseConvention::ReferenceEnergy => reference.data().iter().map(|v| v * v).sum(),
        NmseConvention::ReferenceVariance => {
            let m = reference.mean();
            reference.data().iter().map(|v| (v - m) * (v - m)).sum()
        }
    };
    if norm <= 0.0 {
        return Err(Error::InvalidArgument(
            "nmse reference has zero norm".into(),
        ));
    }
    Ok(err / norm)
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
pub fn psnr(x: &Tensor, reference: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    same_shape("psnr", x, reference)?;
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (cfg.data_range * cfg.data_range / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_identities() {
        let r = Tensor::from_fn([3, 3], |i| 0.1 + i as f64);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        assert_eq!(nmse(&r.map(|v| 2.0 * v), &r).unwrap(), 1.0);
        let ones = Tensor::full([2, 2], 1.0);
        let mut bumped = ones.clone();
        bumped.data_mut()[1] = 2.0;
        assert_eq!(nmse(&bumped, &ones).unwrap(), 0.25);
        assert!(nmse(&ones, &Tensor::zeros([2, 2])).is_err());
        assert!(nmse_with(&ones, &ones, NmseConvention::ReferenceVariance).is_err());
    }

    #[test]
    fn psnr_identities() {
        let cfg = MetricConfig::default();
        let r = Tensor::full([4, 4], 0.5);
        assert_eq!(psnr(&r, &r, &cfg).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&r.map(|v| v + 1.0), &r, &cfg).unwrap(), 0.0);
        assert!((psnr(&r.map(|v| v + 0.1), &r, &cfg).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn window_is_normalized() {
        let k = MetricConfig::default().window_kernel();
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }
}
