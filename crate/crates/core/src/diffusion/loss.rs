use super::predictor::NoisePredictor;
use super::sampling::forward_noise;
use super::schedule::VarianceSchedule;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Inputs and targets for one ε-prediction step.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub timesteps: Vec<usize>,
    pub noise: Vec<Tensor>,
    pub noised: Vec<Tensor>,
}

/// Draws `t ~ U{1..T}` then `ε ~ N(0, I)` per sample and noises each input.
pub fn draw_training_noise(
    batch: &[Tensor],
    sched: &VarianceSchedule,
    rng: &mut RngStream,
) -> Result<NoisedBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut out = NoisedBatch {
        timesteps: Vec::new(),
        noise: Vec::new(),
        noised: Vec::new(),
    };
    for x0 in batch {
        let t = rng.int_inclusive(1, sched.timesteps());
        let eps = rng.gaussian(x0.shape());
        out.noised.push(forward_noise(x0, t, &eps, sched)?);
        out.timesteps.push(t);
        out.noise.push(eps);
    }
    Ok(out)
}

/// Mean squared error between drawn and predicted noise over all pixels of
/// the batch.
pub fn ddpm_loss<P: NoisePredictor + ?Sized>(
    batch: &[Tensor],
    pred: &P,
    sched: &VarianceSchedule,
    rng: &mut RngStream,
) -> Result<f64> {
    let nb = draw_training_noise(batch, sched, rng)?;
    let preds = pred.predict_batch(&nb.noised, &nb.timesteps)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, p) in nb.noise.iter().zip(&preds) {
        let d = e.zip_map(p, |a, b| (a - b) * (a - b))?;
        sum += d.sum();
        count += d.len();
    }
    Ok(sum / count as f64)
}
