use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

/// Per-step coefficients, indexed from 1 like the math. `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<ScheduleConfig> for VarianceSchedule {
    type Error = Error;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        make_schedule(c.timesteps, c.beta_start, c.beta_end, c.kind)
    }
}

impl From<VarianceSchedule> for ScheduleConfig {
    fn from(s: VarianceSchedule) -> Self {
        s.config
    }
}

pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<VarianceSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one timestep".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(VarianceSchedule {
        config: ScheduleConfig {
            timesteps,
            beta_start,
            beta_end,
            kind,
        },
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl VarianceSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::try_from(*c)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.timesteps() || (t == 0 && !allow_zero) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = make_schedule(2, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alphas(), &[0.9999, 0.98]);
        assert!((s.alpha_bar(2) - 0.979902).abs() < 1e-12);
    }

    #[test]
    fn single_step_base_case() {
        let s = make_schedule(1, 0.01, 0.01, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn serializes_as_config() {
        let s = make_schedule(500, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"timesteps":500,"beta_start":0.0001,"beta_end":0.02,"kind":"linear"}"#
        );
        let back: VarianceSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
