//! Diffusion-based motion artifact simulation for MRI slices.
//!
//! Phase one trains a denoising diffusion model on motion-affected slices.
//! Phase two partially noises clean slices and denoises them with that model,
//! which stamps learned artifacts onto them; the resulting pairs train a
//! supervised U-Net corrector evaluated with SSIM, NMSE and PSNR.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, NodeId};
pub use rng::RngStream;
pub use tensor::Tensor;
