use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, Provenance};
use super::optim::{Adam, AdamConfig};
use super::params::ParamStore;
use super::unet::{timestep_embedding, UNet, UNetConfig, UNetNodes};
use crate::data::pad_reflect;
use crate::diffusion::{draw_training_noise, ScheduleConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::metrics::{ssim_loss_nodes, MetricConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const VALIDATION_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainerConfig {
            learning_rate: adam.learning_rate,
            batch_size: 6,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-4,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid trainer config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without an improvement of at
/// least `min_delta` over the best validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    epoch: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            epoch: 0,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        match self.best {
            Some((_, b)) if loss >= b - self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((self.epoch, loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// 1-based epoch and loss of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// A loss over a fixed dataset that can be differentiated with respect to
/// the network parameters.
pub trait Objective {
    fn name(&self) -> &'static str;
    fn train_len(&self) -> usize;
    fn schedule(&self) -> Option<ScheduleConfig> {
        None
    }
    /// Mean loss over the given training indices and its parameter gradients
    /// in parameter-store order.
    fn loss_and_grad(
        &self,
        params: &ParamStore,
        batch: &[usize],
        rng: &mut RngStream,
    ) -> Result<(f64, Vec<Tensor>)>;
    fn validation_loss(
        &self,
        params: &ParamStore,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<f64>;
}

struct LossGraph {
    graph: Graph,
    nodes: UNetNodes,
    target: NodeId,
    loss: NodeId,
}

impl LossGraph {
    fn evaluate(
        &self,
        params: &ParamStore,
        x: &Tensor,
        target: &Tensor,
        temb: Option<&Tensor>,
    ) -> Result<f64> {
        let b = self.bindings(params, x, target, temb);
        self.graph.evaluate(self.loss, &b)?.item()
    }

    fn gradient(
        &self,
        params: &ParamStore,
        x: &Tensor,
        target: &Tensor,
        temb: Option<&Tensor>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let b = self.bindings(params, x, target, temb);
        let (loss, mut grads) = self.graph.gradient(self.loss, &b)?;
        let g = self
            .nodes
            .params
            .iter()
            .zip(params.tensors())
            .map(|(id, p)| {
                grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        Ok((loss, g))
    }

    fn bindings<'a>(
        &self,
        params: &'a ParamStore,
        x: &'a Tensor,
        target: &'a Tensor,
        temb: Option<&'a Tensor>,
    ) -> Bindings<'a> {
        let mut b = Bindings::new();
        b.bind(self.nodes.input, x).bind(self.target, target);
        if let (Some(node), Some(t)) = (self.nodes.time, temb) {
            b.bind(node, t);
        }
        self.nodes.bind(&mut b, params);
        b
    }
}

fn stack_images(items: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
    let s = owned
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .shape()
        .to_vec();
    Tensor::stack(&owned)?.reshape([owned.len(), 1, s[0], s[1]])
}

fn pad_all(images: Vec<Tensor>, multiple: usize) -> Result<Vec<Tensor>> {
    let Some(first) = images.first() else {
        return Ok(images);
    };
    let shape = first.shape().to_vec();
    if shape.len() != 2 || images.iter().any(|t| t.shape() != shape) {
        return Err(Error::shape(
            "training set",
            "all images must be [H, W] with one shared shape",
        ));
    }
    images.iter().map(|t| pad_reflect(t, multiple)).collect()
}

/// ε-prediction mean squared error for a time-conditioned net.
pub struct DdpmObjective {
    net: LossGraph,
    schedule: VarianceSchedule,
    embedding_dim: usize,
    train: Vec<Tensor>,
    val: Vec<Tensor>,
}

impl DdpmObjective {
    pub fn new(
        cfg: &UNetConfig,
        schedule: VarianceSchedule,
        train: Vec<Tensor>,
        val: Vec<Tensor>,
    ) -> Result<Self> {
        if !cfg.time_conditioned {
            return Err(Error::InvalidArgument(
                "the diffusion objective needs a time-conditioned net".into(),
            ));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(
                "training and validation sets must be nonempty".into(),
            ));
        }
        let mut graph = Graph::new();
        let nodes = UNetNodes::build(&mut graph, cfg);
        let target = graph.input("target");
        let diff = graph.sub(nodes.output, target);
        let sq = graph.square(diff);
        let loss = graph.mean(sq);
        Ok(DdpmObjective {
            net: LossGraph {
                graph,
                nodes,
                target,
                loss,
            },
            schedule,
            embedding_dim: cfg.time_embedding_dim,
            train: pad_all(train, cfg.size_multiple())?,
            val: pad_all(val, cfg.size_multiple())?,
        })
    }

    fn batch_inputs(
        &self,
        items: &[&Tensor],
        rng: &mut RngStream,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
        let nb = draw_training_noise(&owned, &self.schedule, rng)?;
        let x = stack_images(&nb.noised.iter().collect::<Vec<_>>())?;
        let target = stack_images(&nb.noise.iter().collect::<Vec<_>>())?;
        Ok((
            x,
            target,
            timestep_embedding(&nb.timesteps, self.embedding_dim),
        ))
    }
}

impl Objective for DdpmObjective {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn schedule(&self) -> Option<ScheduleConfig> {
        Some(*self.schedule.config())
    }

    fn loss_and_grad(
        &self,
        params: &ParamStore,
        batch: &[usize],
        rng: &mut RngStream,
    ) -> Result<(f64, Vec<Tensor>)> {
        let items: Vec<&Tensor> = batch.iter().map(|&i| &self.train[i]).collect();
        let (x, target, temb) = self.batch_inputs(&items, rng)?;
        self.net.gradient(params, &x, &target, Some(&temb))
    }

    fn validation_loss(
        &self,
        params: &ParamStore,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.val.chunks(batch_size) {
            let items: Vec<&Tensor> = chunk.iter().collect();
            let (x, target, temb) = self.batch_inputs(&items, rng)?;
            total += self.net.evaluate(params, &x, &target, Some(&temb))? * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

/// `1 − SSIM` between the corrected input and its clean target.
pub struct SsimObjective {
    net: LossGraph,
    train: Vec<(Tensor, Tensor)>,
    val: Vec<(Tensor, Tensor)>,
}

impl SsimObjective {
    /// Pairs are `(degraded, clean)` `[H, W]` images of one shared shape.
    pub fn new(
        cfg: &UNetConfig,
        metric: &MetricConfig,
        train: Vec<(Tensor, Tensor)>,
        val: Vec<(Tensor, Tensor)>,
    ) -> Result<Self> {
        if cfg.time_conditioned {
            return Err(Error::InvalidArgument(
                "the corrector is not time-conditioned".into(),
            ));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(
                "training and validation sets must be nonempty".into(),
            ));
        }
        let shape = train[0].0.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "ssim objective",
                format!("expected [H, W] images, got {shape:?}"),
            ));
        }
        let prep = |pairs: Vec<(Tensor, Tensor)>| -> Result<Vec<(Tensor, Tensor)>> {
            pairs
                .into_iter()
                .map(|(x, y)| {
                    if x.shape() != shape || y.shape() != shape {
                        return Err(Error::shape(
                            "ssim objective",
                            "all pairs must share one shape",
                        ));
                    }
                    Ok((pad_reflect(&x, cfg.size_multiple())?, y))
                })
                .collect()
        };
        let train = prep(train)?;
        let val = prep(val)?;
        let mut graph = Graph::new();
        let nodes = UNetNodes::build(&mut graph, cfg);
        let target = graph.input("target");
        let padded = train[0].0.shape().to_vec();
        let mut out = nodes.output;
        if padded[0] != shape[0] {
            out = graph.slice(out, 2, 0, shape[0]);
        }
        if padded[1] != shape[1] {
            out = graph.slice(out, 3, 0, shape[1]);
        }
        let loss = ssim_loss_nodes(&mut graph, out, target, metric);
        Ok(SsimObjective {
            net: LossGraph {
                graph,
                nodes,
                target,
                loss,
            },
            train,
            val,
        })
    }

    fn inputs(items: &[&(Tensor, Tensor)]) -> Result<(Tensor, Tensor)> {
        let xs: Vec<&Tensor> = items.iter().map(|p| &p.0).collect();
        let ys: Vec<&Tensor> = items.iter().map(|p| &p.1).collect();
        Ok((stack_images(&xs)?, stack_images(&ys)?))
    }
}

impl Objective for SsimObjective {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(
        &self,
        params: &ParamStore,
        batch: &[usize],
        _rng: &mut RngStream,
    ) -> Result<(f64, Vec<Tensor>)> {
        let items: Vec<&(Tensor, Tensor)> = batch.iter().map(|&i| &self.train[i]).collect();
        let (x, y) = Self::inputs(&items)?;
        self.net.gradient(params, &x, &y, None)
    }

    fn validation_loss(
        &self,
        params: &ParamStore,
        batch_size: usize,
        _rng: &mut RngStream,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.val.chunks(batch_size) {
            let items: Vec<&(Tensor, Tensor)> = chunk.iter().collect();
            let (x, y) = Self::inputs(&items)?;
            total += self.net.evaluate(params, &x, &y, None)? * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Mini-batch Adam with early stopping on the validation loss. Returns the
/// best-validation parameters.
///
/// `patients` lists the training and validation patient ids; any overlap is
/// an error unless `allow_overlap` is set.
pub fn train<O: Objective>(
    model: UNet,
    objective: &O,
    cfg: &TrainerConfig,
    rng: &RngStream,
    patients: (&[String], &[String]),
    allow_overlap: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !allow_overlap {
        let train: BTreeSet<&String> = patients.0.iter().collect();
        let shared: Vec<String> = patients
            .1
            .iter()
            .filter(|p| train.contains(p))
            .cloned()
            .collect();
        if !shared.is_empty() {
            return Err(Error::PatientOverlap(shared));
        }
    }
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let net_cfg = *model.config();
    let mut params = model.into_params();
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = params.quantized();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.split_path(&[SHUFFLE_STREAM, epoch as u64])
            .shuffle(&mut order);
        let mut batch_rng = rng.split_path(&[BATCH_STREAM, epoch as u64]);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = objective
                .loss_and_grad(&params, batch, &mut batch_rng)
                .map_err(diverged(epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training loss {loss}"),
                });
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut params, &grads)?;
        }
        let train_loss = sum / n as f64;
        let mut val_rng = rng.split(VALIDATION_STREAM);
        let val = objective
            .validation_loss(&params, cfg.batch_size, &mut val_rng)
            .map_err(diverged(epoch))?;
        if !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss {val}"),
            });
        }
        log::info!(
            "{} epoch {epoch}: train {train_loss:.6} val {val:.6}",
            objective.name()
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss: val,
        });
        match stopper.observe(val) {
            StopDecision::Improved => best = params.quantized(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_loss) = stopper.best().expect("at least one epoch");
    let provenance = Provenance {
        objective: objective.name().to_string(),
        seed: rng.seed(),
        epochs_run: history.len(),
        best_epoch,
        best_validation_loss: Some(best_loss),
        train_patients: patients.0.to_vec(),
        validation_patients: patients.1.to_vec(),
    };
    let checkpoint = ModelCheckpoint::new(net_cfg, objective.schedule(), provenance, &best)?;
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}
