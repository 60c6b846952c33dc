//! U-Net noise predictor and corrector, checkpoints, and the training loop.

mod checkpoint;
mod optim;
mod params;
mod train;
mod unet;

pub use checkpoint::{ModelCheckpoint, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use train::{
    train, DdpmObjective, EarlyStopping, EpochRecord, Objective, SsimObjective, StopDecision,
    TrainOutcome, TrainerConfig,
};
pub use unet::{timestep_embedding, InitScheme, TrainedUNetPredictor, UNet, UNetConfig, UNetNodes};
