use serde::{Deserialize, Serialize};

use super::predictor::NoisePredictor;
use super::schedule::VarianceSchedule;
use crate::data::{ImageSlice, Simulator};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const RANGE_EPS: f64 = 1e-6;

/// Noise coefficient of the one-shot forward jump.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·z`
    #[default]
    Standard,
    /// `√ᾱ_t·x0 + (1−ᾱ_t)·z`, with the noise coefficient left unsquared.
    LiteralPaper,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Stochastic,
    /// Every `z` is zero, including the initial noising. Oracle tests only.
    Deterministic,
}

/// What happens to the intensity range once all passes are done.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRange {
    /// Leave the clamped result as is.
    #[default]
    Clamp,
    /// Min-max rescale the result onto the input slice's own range.
    MatchInput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationOptions {
    #[serde(default)]
    pub noise: NoiseMode,
    #[serde(default)]
    pub coefficient: CoefficientMode,
    #[serde(default)]
    pub output: OutputRange,
}

/// Partial step `n` and how many times the noise-then-denoise pass is
/// repeated on its own output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub n: usize,
    pub iterations: usize,
    #[serde(default = "yes")]
    pub deterministic_final_step: bool,
}

fn yes() -> bool {
    true
}

impl SimulationParams {
    pub const PRESET_NAMES: [&'static str; 4] = ["T", "Z", "H", "J"];
    pub const PRESET_TIMESTEPS: usize = 500;

    pub fn new(n: usize, iterations: usize) -> Self {
        SimulationParams {
            n,
            iterations,
            deterministic_final_step: true,
        }
    }

    /// Named presets, defined on a 500-step schedule.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "T" => Some(Self::new(120, 4)),
            "Z" => Some(Self::new(170, 5)),
            "H" => Some(Self::new(280, 2)),
            "J" => Some(Self::new(330, 1)),
            _ => None,
        }
    }

    /// Scales `n` to a schedule with `timesteps` steps, rounding to nearest.
    pub fn rescaled(self, from_timesteps: usize, timesteps: usize) -> Self {
        let n = (self.n as f64 * timesteps as f64 / from_timesteps as f64).round() as usize;
        SimulationParams { n, ..self }
    }

    pub fn validate(&self, sched: &VarianceSchedule) -> Result<()> {
        if self.n >= sched.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "partial step n={} must be below T={}",
                self.n,
                sched.timesteps()
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        Ok(())
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    forward_noise_with(x0, t, z, sched, CoefficientMode::Standard)
}

/// Jumps from `x0` straight to noise level `t`. `t = 0` returns `x0`.
pub fn forward_noise_with(
    x0: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &VarianceSchedule,
    mode: CoefficientMode,
) -> Result<Tensor> {
    sched.check_step(t, true)?;
    check_same_shape("forward_noise", x0, z)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar(t);
    let c = match mode {
        CoefficientMode::Standard => (1.0 - ab).sqrt(),
        CoefficientMode::LiteralPaper => 1.0 - ab,
    };
    let s = ab.sqrt();
    x0.zip_map(z, |x, z| s * x + c * z)
}

/// One forward transition `x_t = √α_t·x_{t−1} + √β_t·z`.
pub fn forward_step(
    x_prev: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    sched.check_step(t, false)?;
    check_same_shape("forward_step", x_prev, z)?;
    let (a, b) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
    x_prev.zip_map(z, |x, z| a * x + b * z)
}

/// One denoising step given a noise estimate.
pub fn reverse_step_with_eps(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &VarianceSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t, false)?;
    check_same_shape("reverse_step", x_t, eps)?;
    check_same_shape("reverse_step", x_t, z)?;
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidArgument(
            "the final step (t=1) takes z = 0".into(),
        ));
    }
    let a = sched.alpha(t);
    let inv = 1.0 / a.sqrt();
    let k = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    let mean = x_t.zip_map(eps, |x, e| inv * (x - k * e))?;
    mean.zip_map(z, |m, z| m + sigma * z)
}

pub fn reverse_step<P: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    pred: &P,
    sched: &VarianceSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t, false)?;
    let eps = pred.predict(x_t, t)?;
    reverse_step_with_eps(x_t, t, &eps, sched, z)
}

fn step_noise(rng: &mut RngStream, shape: &[usize], t: usize, mode: NoiseMode) -> Tensor {
    if t > 1 && mode == NoiseMode::Stochastic {
        rng.gaussian(shape)
    } else {
        Tensor::zeros(shape.to_vec())
    }
}

/// Denoises from `x_start` at level `from` down to level 0.
fn denoise_from<P: NoisePredictor + ?Sized>(
    mut x: Tensor,
    from: usize,
    pred: &P,
    sched: &VarianceSchedule,
    rng: &mut RngStream,
    mode: NoiseMode,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    for t in (1..=from).rev() {
        let z = step_noise(rng, &shape, t, mode);
        x = reverse_step(&x, t, pred, sched, &z)?;
    }
    Ok(x)
}

/// Full ancestral sampling chain starting from `N(0, I)` at step `T`.
pub fn sample<P: NoisePredictor + ?Sized>(
    pred: &P,
    sched: &VarianceSchedule,
    shape: &[usize],
    rng: &mut RngStream,
    mode: NoiseMode,
) -> Result<Tensor> {
    let x = rng.gaussian(shape);
    denoise_from(x, sched.timesteps(), pred, sched, rng, mode)
}

/// One pass of noising to level `n` then `n` denoising steps. No clamping
/// and no input range check.
pub fn partial_diffusion<P: NoisePredictor + ?Sized>(
    y: &Tensor,
    n: usize,
    pred: &P,
    sched: &VarianceSchedule,
    rng: &mut RngStream,
    options: SimulationOptions,
) -> Result<Tensor> {
    sched.check_step(n, true)?;
    if n == 0 {
        return Ok(y.clone());
    }
    let z = match options.noise {
        NoiseMode::Stochastic => rng.gaussian(y.shape()),
        NoiseMode::Deterministic => Tensor::zeros(y.shape().to_vec()),
    };
    let x_n = forward_noise_with(y, n, &z, sched, options.coefficient)?;
    denoise_from(x_n, n, pred, sched, rng, options.noise)
}

pub fn simulate_motion<P: NoisePredictor + ?Sized>(
    y: &ImageSlice,
    params: SimulationParams,
    pred: &P,
    sched: &VarianceSchedule,
    rng: &mut RngStream,
) -> Result<ImageSlice> {
    simulate_motion_with(y, params, pred, sched, rng, SimulationOptions::default())
}

/// Repeats the partial-diffusion pass `iterations` times on its own output
/// with fresh noise each time, clamping to `[0, 1]` after every pass.
pub fn simulate_motion_with<P: NoisePredictor + ?Sized>(
    y: &ImageSlice,
    params: SimulationParams,
    pred: &P,
    sched: &VarianceSchedule,
    rng: &mut RngStream,
    options: SimulationOptions,
) -> Result<ImageSlice> {
    params.validate(sched)?;
    if y.pixels
        .iter()
        .any(|&v| !(-RANGE_EPS..=1.0 + RANGE_EPS).contains(&(v as f64)))
    {
        return Err(Error::InvalidArgument(
            "input slice is not normalized to [0, 1]".into(),
        ));
    }
    if params.n == 0 {
        return Ok(y.clone());
    }
    let mut x = y.to_tensor();
    for _ in 0..params.iterations {
        x = partial_diffusion(&x, params.n, pred, sched, rng, options)?.map(|v| v.clamp(0.0, 1.0));
    }
    if options.output == OutputRange::MatchInput {
        x = match_range(&x, &y.to_tensor());
    }
    y.with_pixels(&x)
}

fn match_range(x: &Tensor, target: &Tensor) -> Tensor {
    let range = |t: &Tensor| {
        t.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            })
    };
    let ((lo, hi), (tlo, thi)) = (range(x), range(target));
    if hi - lo <= f64::EPSILON {
        return x.clone();
    }
    let k = (thi - tlo) / (hi - lo);
    x.map(|v| (tlo + (v - lo) * k).clamp(0.0, 1.0))
}

/// Stamps learned artifacts using one preset per replicate, cycling.
pub struct DiffusionSimulator<P> {
    pub predictor: P,
    pub schedule: VarianceSchedule,
    pub presets: Vec<(String, SimulationParams)>,
    pub options: SimulationOptions,
}

impl<P: NoisePredictor> DiffusionSimulator<P> {
    pub fn new(
        predictor: P,
        schedule: VarianceSchedule,
        presets: Vec<(String, SimulationParams)>,
    ) -> Result<Self> {
        if presets.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one simulation preset is required".into(),
            ));
        }
        for (_, p) in &presets {
            p.validate(&schedule)?;
        }
        Ok(DiffusionSimulator {
            predictor,
            schedule,
            presets,
            options: SimulationOptions::default(),
        })
    }
}

impl<P: NoisePredictor> Simulator for DiffusionSimulator<P> {
    fn simulate(
        &self,
        clean: &ImageSlice,
        replicate: usize,
        rng: &mut RngStream,
    ) -> Result<ImageSlice> {
        let (name, params) = &self.presets[replicate % self.presets.len()];
        let mut out = simulate_motion_with(
            clean,
            *params,
            &self.predictor,
            &self.schedule,
            rng,
            self.options,
        )?;
        out.label = format!("sim-{name}");
        Ok(out)
    }
}
