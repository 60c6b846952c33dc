use super::schedule::VarianceSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ε-prediction network interface: `predict(x_t, t)` estimates the noise in
/// `x_t` at step `t`. Output shape matches input shape.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;

    fn predict_batch(&self, xs: &[Tensor], ts: &[usize]) -> Result<Vec<Tensor>> {
        if xs.len() != ts.len() {
            return Err(Error::shape(
                "predict_batch",
                format!("{} inputs, {} timesteps", xs.len(), ts.len()),
            ));
        }
        xs.iter()
            .zip(ts)
            .map(|(x, &t)| self.predict(x, t))
            .collect()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict(x_t, t)
    }

    fn predict_batch(&self, xs: &[Tensor], ts: &[usize]) -> Result<Vec<Tensor>> {
        (**self).predict_batch(xs, ts)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape().to_vec()))
    }
}

/// Exact posterior-mean noise for data drawn i.i.d. per pixel from
/// `N(mean, std²)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianPredictor {
    pub mean: f64,
    pub std: f64,
    schedule: VarianceSchedule,
}

impl AnalyticGaussianPredictor {
    pub fn new(mean: f64, std: f64, schedule: &VarianceSchedule) -> Self {
        AnalyticGaussianPredictor {
            mean,
            std,
            schedule: schedule.clone(),
        }
    }

    pub fn eps(&self, x_t: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        (1.0 - ab).sqrt() * (x_t - ab.sqrt() * self.mean) / (ab * self.std * self.std + 1.0 - ab)
    }
}

impl NoisePredictor for AnalyticGaussianPredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t, false)?;
        Ok(x_t.map(|v| self.eps(v, t)))
    }
}

/// Adapts a closure into a predictor.
pub struct FnPredictor<F>(pub F);

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Sync,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (self.0)(x_t, t)
    }
}
