//! Variance schedules, forward noising, reverse denoising, and partial
//! diffusion for stamping learned artifacts onto clean slices.

mod loss;
mod predictor;
mod sampling;
mod schedule;

pub use loss::{ddpm_loss, draw_training_noise, NoisedBatch};
pub use predictor::{AnalyticGaussianPredictor, FnPredictor, NoisePredictor, ZeroPredictor};
pub use sampling::{
    forward_noise, forward_noise_with, forward_step, partial_diffusion, reverse_step,
    reverse_step_with_eps, sample, simulate_motion, simulate_motion_with, CoefficientMode,
    DiffusionSimulator, NoiseMode, OutputRange, SimulationOptions, SimulationParams,
};
pub use schedule::{make_schedule, ScheduleConfig, ScheduleKind, VarianceSchedule};
