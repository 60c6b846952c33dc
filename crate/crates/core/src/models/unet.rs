use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::data::{crop_to, pad_reflect};
use crate::diffusion::{NoisePredictor, VarianceSchedule};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId, Padding};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `±√(6 / fan_in)`, zero biases and a zero output layer.
    #[default]
    He,
    /// Center-tap pass-through weights along the skip path plus He noise
    /// scaled by 0.1, so the untrained net is close to the identity.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_conditioned: bool,
    pub time_embedding_dim: usize,
    pub init: InitScheme,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            growth: 2,
            in_channels: 1,
            out_channels: 1,
            time_conditioned: false,
            time_embedding_dim: 32,
            init: InitScheme::He,
        }
    }
}

const IDENTITY_NOISE: f64 = 0.1;

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    kind: SpecKind,
}

#[derive(Clone, Copy)]
enum SpecKind {
    Bias,
    Conv { dirac: Dirac },
    Linear,
}

/// Which input channel feeds output channel `o` at the center tap.
#[derive(Clone, Copy)]
enum Dirac {
    None,
    /// `o % cin`
    Cycle,
    /// `offset + o`
    Offset(usize),
    /// every input channel with weight `1 / cin`
    Average,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.base_channels == 0
            || self.growth == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid U-Net config {self:?}"
            )));
        }
        if self.time_conditioned
            && (self.time_embedding_dim < 2 || !self.time_embedding_dim.is_multiple_of(2))
        {
            return Err(Error::InvalidArgument(
                "time embedding dimension must be even and at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.growth.pow(level as u32)
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let d = self.time_embedding_dim;
        let conv = |v: &mut Vec<ParamSpec>,
                    name: String,
                    cin: usize,
                    cout: usize,
                    k: usize,
                    dirac: Dirac| {
            v.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: cin * k * k,
                kind: SpecKind::Conv { dirac },
            });
            v.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: 0,
                kind: SpecKind::Bias,
            });
        };
        let linear = |v: &mut Vec<ParamSpec>, name: String, cin: usize, cout: usize| {
            v.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cin, cout],
                fan_in: cin,
                kind: SpecKind::Linear,
            });
            v.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: 0,
                kind: SpecKind::Bias,
            });
        };
        if self.time_conditioned {
            linear(&mut v, "time.mlp".into(), d, d);
        }
        let block = |v: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, a: Dirac| {
            conv(v, format!("{name}.conv_a"), cin, cout, 3, a);
            if self.time_conditioned {
                linear(v, format!("{name}.time_scale"), d, cout);
                linear(v, format!("{name}.time"), d, cout);
            }
            conv(v, format!("{name}.conv_b"), cout, cout, 3, Dirac::Cycle);
        };
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            block(
                &mut v,
                &format!("enc{l}"),
                cin,
                self.channels(l),
                Dirac::Cycle,
            );
            cin = self.channels(l);
        }
        let bottom = self.channels(self.levels);
        block(&mut v, "mid", cin, bottom, Dirac::None);
        let mut below = bottom;
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            block(
                &mut v,
                &format!("dec{l}"),
                below + c,
                c,
                Dirac::Offset(below),
            );
            below = c;
        }
        conv(
            &mut v,
            "out".into(),
            below,
            self.out_channels,
            1,
            Dirac::Average,
        );
        v
    }

    /// Parameter count implied by the architecture.
    pub fn parameter_count(&self) -> usize {
        self.specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn init_params(&self, rng: &mut RngStream) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        for spec in self.specs() {
            let n: usize = spec.shape.iter().product();
            let mut data = vec![0.0; n];
            if !matches!(spec.kind, SpecKind::Bias) {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                let scale = match (self.init, spec.kind) {
                    (InitScheme::Identity, SpecKind::Conv { .. }) => IDENTITY_NOISE,
                    (
                        InitScheme::He,
                        SpecKind::Conv {
                            dirac: Dirac::Average,
                        },
                    ) => 0.0,
                    _ => 1.0,
                };
                data.iter_mut()
                    .for_each(|w| *w = scale * rng.uniform_range(-bound, bound));
            }
            if let (InitScheme::Identity, SpecKind::Conv { dirac }) = (self.init, spec.kind) {
                let (cout, cin, k) = (spec.shape[0], spec.shape[1], spec.shape[2]);
                let c = k / 2;
                let mut set =
                    |o: usize, i: usize, v: f64| data[((o * cin + i) * k + c) * k + c] += v;
                for o in 0..cout {
                    match dirac {
                        Dirac::None => {}
                        Dirac::Cycle => set(o, o % cin, 1.0),
                        Dirac::Offset(off) => set(o, off + o, 1.0),
                        Dirac::Average => (0..cin).for_each(|i| set(o, i, 1.0 / cin as f64)),
                    }
                }
            }
            store.push(spec.name, Tensor::new(spec.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn zero_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in self.specs() {
            store
                .push(spec.name, Tensor::zeros(spec.shape))
                .expect("unique names");
        }
        store
    }

    /// Checks names and shapes against the architecture.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let specs = self.specs();
        if specs.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(t·f_i)…, cos(t·f_i)…]` with
/// `f_i = 10000^(−i/half)`, one row per timestep.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new([ts.len(), dim], out).expect("embedding shape")
}

/// Graph handles of a built network.
#[derive(Clone, Debug)]
pub struct UNetNodes {
    pub input: NodeId,
    pub time: Option<NodeId>,
    pub output: NodeId,
    /// In parameter-store order.
    pub params: Vec<NodeId>,
}

impl UNetNodes {
    /// Appends the network to `g`, reading `[B, C, H, W]` input.
    pub fn build(g: &mut Graph, cfg: &UNetConfig) -> UNetNodes {
        let mut params = Vec::new();
        let mut p = |g: &mut Graph, name: String| {
            let id = g.param(name);
            params.push(id);
            id
        };
        let input = g.input("x");
        let mut time = None;
        let mut temb = None;
        if cfg.time_conditioned {
            let t = g.input("t_emb");
            time = Some(t);
            let w = p(g, "time.mlp.weight".into());
            let b = p(g, "time.mlp.bias".into());
            let h = g.matmul(t, w);
            let h = g.add(h, b);
            temb = Some(g.relu(h));
        }
        let mut block = |g: &mut Graph, name: &str, x: NodeId| {
            let wa = p(g, format!("{name}.conv_a.weight"));
            let ba = p(g, format!("{name}.conv_a.bias"));
            let mut h = g.conv2d(x, wa, Some(ba), Padding::Same);
            if let Some(e) = temb {
                let ws = p(g, format!("{name}.time_scale.weight"));
                let bs = p(g, format!("{name}.time_scale.bias"));
                let scale = g.matmul(e, ws);
                let scale = g.add(scale, bs);
                let scale = g.affine(scale, 1.0, 1.0);
                h = g.channel_scale(h, scale);
                let wt = p(g, format!("{name}.time.weight"));
                let bt = p(g, format!("{name}.time.bias"));
                let proj = g.matmul(e, wt);
                let proj = g.add(proj, bt);
                h = g.channel_bias(h, proj);
            }
            let h = g.relu(h);
            let wb = p(g, format!("{name}.conv_b.weight"));
            let bb = p(g, format!("{name}.conv_b.bias"));
            let h = g.conv2d(h, wb, Some(bb), Padding::Same);
            g.relu(h)
        };
        let mut skips = Vec::new();
        let mut x = input;
        for l in 0..cfg.levels {
            let h = block(g, &format!("enc{l}"), x);
            skips.push(h);
            x = g.avg_pool2(h);
        }
        x = block(g, "mid", x);
        for l in (0..cfg.levels).rev() {
            let up = g.upsample2(x);
            let cat = g.concat(&[up, skips[l]], 1);
            x = block(g, &format!("dec{l}"), cat);
        }
        let wo = p(g, "out.weight".into());
        let bo = p(g, "out.bias".into());
        let output = g.conv2d(x, wo, Some(bo), Padding::Same);
        UNetNodes {
            input,
            time,
            output,
            params,
        }
    }

    pub fn bind<'a>(&self, b: &mut Bindings<'a>, params: &'a ParamStore) {
        for (id, t) in self.params.iter().zip(params.tensors()) {
            b.bind(*id, t);
        }
    }
}

/// A network with concrete parameters.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    graph: Graph,
    nodes: UNetNodes,
}

impl UNet {
    pub fn new(config: UNetConfig, rng: &mut RngStream) -> Result<Self> {
        let params = config.init_params(rng)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        let mut graph = Graph::new();
        let nodes = UNetNodes::build(&mut graph, &config);
        Ok(UNet {
            config,
            params,
            graph,
            nodes,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// `[B, C_in, H, W] → [B, C_out, H, W]`. `ts` is required exactly when
    /// the net is time-conditioned.
    pub fn forward(&self, x: &Tensor, ts: Option<&[usize]>) -> Result<Tensor> {
        let s = x.shape();
        let m = self.config.size_multiple();
        if s.len() != 4
            || s[1] != self.config.in_channels
            || !s[2].is_multiple_of(m)
            || !s[3].is_multiple_of(m)
        {
            return Err(Error::shape(
                "unet",
                format!(
                    "input {:?} needs [B, {}, H, W] with H, W multiples of {m}",
                    s, self.config.in_channels
                ),
            ));
        }
        let emb;
        let mut b = Bindings::new();
        b.bind(self.nodes.input, x);
        match (self.nodes.time, ts) {
            (Some(node), Some(ts)) => {
                if ts.len() != s[0] {
                    return Err(Error::shape(
                        "unet",
                        format!("{} timesteps for batch {}", ts.len(), s[0]),
                    ));
                }
                emb = timestep_embedding(ts, self.config.time_embedding_dim);
                b.bind(node, &emb);
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "time-conditioned net needs timesteps".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "unconditioned net takes no timesteps".into(),
                ))
            }
        }
        self.nodes.bind(&mut b, &self.params);
        self.graph.evaluate(self.nodes.output, &b)
    }

    /// Runs a batch of `[H, W]` images through the net with reflect padding,
    /// cropping the result back.
    pub fn apply_padded(&self, images: &[Tensor], ts: Option<&[usize]>) -> Result<Vec<Tensor>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = match first.shape() {
            &[h, w] => (h, w),
            s => {
                return Err(Error::shape(
                    "unet",
                    format!("expected [H, W] images, got {s:?}"),
                ))
            }
        };
        let mut padded = Vec::with_capacity(images.len());
        for img in images {
            if img.shape() != [h, w] {
                return Err(Error::shape(
                    "unet",
                    "images in one batch must share a shape",
                ));
            }
            padded.push(pad_reflect(img, self.config.size_multiple())?);
        }
        let ps = padded[0].shape().to_vec();
        let batch = Tensor::stack(&padded)?.reshape([images.len(), 1, ps[0], ps[1]])?;
        let out = self.forward(&batch, ts)?;
        out.reshape([images.len(), ps[0], ps[1]])?
            .unstack()
            .iter()
            .map(|t| crop_to(t, h, w))
            .collect()
    }

    /// Corrector inference on one `[H, W]` image.
    pub fn correct(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self
            .apply_padded(std::slice::from_ref(image), None)?
            .remove(0))
    }
}

/// A time-conditioned U-Net used as the diffusion noise estimator.
#[derive(Clone, Debug)]
pub struct TrainedUNetPredictor {
    pub net: UNet,
    pub schedule: VarianceSchedule,
}

impl TrainedUNetPredictor {
    pub fn new(net: UNet, schedule: VarianceSchedule) -> Result<Self> {
        if !net.config().time_conditioned {
            return Err(Error::InvalidArgument(
                "noise predictor must be time-conditioned".into(),
            ));
        }
        Ok(TrainedUNetPredictor { net, schedule })
    }
}

impl NoisePredictor for TrainedUNetPredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self
            .predict_batch(std::slice::from_ref(x_t), &[t])?
            .remove(0))
    }

    fn predict_batch(&self, xs: &[Tensor], ts: &[usize]) -> Result<Vec<Tensor>> {
        for &t in ts {
            if t == 0 || t > self.schedule.timesteps() {
                return Err(Error::InvalidArgument(format!(
                    "timestep {t} outside the schedule"
                )));
            }
        }
        self.net.apply_padded(xs, Some(ts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract_and_zero_params() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        };
        let net = UNet::new(cfg, &mut RngStream::new(0, 0)).unwrap();
        let x = Tensor::full([2, 1, 8, 12], 0.3);
        assert_eq!(net.forward(&x, None).unwrap().shape(), &[2, 1, 8, 12]);
        assert!(net.forward(&Tensor::zeros([1, 1, 6, 8]), None).is_err());

        let mut params = cfg.zero_params();
        params.get_mut("out.bias").unwrap().data_mut()[0] = 0.25;
        let zero = UNet::from_params(cfg, params).unwrap();
        let out = zero.forward(&x, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn padded_apply_crops_back() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 2,
            time_conditioned: true,
            time_embedding_dim: 4,
            ..Default::default()
        };
        let net = UNet::new(cfg, &mut RngStream::new(1, 0)).unwrap();
        let imgs = vec![Tensor::full([10, 9], 0.5), Tensor::full([10, 9], 0.1)];
        let out = net.apply_padded(&imgs, Some(&[3, 7])).unwrap();
        assert_eq!(out[1].shape(), &[10, 9]);
        assert!(net.apply_padded(&imgs, None).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0, 5], 4);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 5f64.sin()).abs() < 1e-15);
    }
}
