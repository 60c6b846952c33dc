#![allow(dead_code)]

use dima_core::diffusion::{make_schedule, ScheduleKind};
use dima_core::graph::Padding;
use dima_core::models::{DdpmObjective, InitScheme, Objective, UNetConfig};
use dima_core::{Bindings, Graph, NodeId, RngStream, Tensor};

pub fn eval_scalar(g: &Graph, root: NodeId, leaves: &[(NodeId, Tensor)]) -> f64 {
    let mut b = Bindings::new();
    for (id, t) in leaves {
        b.bind(*id, t);
    }
    g.evaluate(root, &b).unwrap().item().unwrap()
}

pub fn reverse_grads(g: &Graph, root: NodeId, leaves: &[(NodeId, Tensor)]) -> Vec<Tensor> {
    let mut b = Bindings::new();
    for (id, t) in leaves {
        b.bind(*id, t);
    }
    let (_, grads) = g.gradient(root, &b).unwrap();
    leaves
        .iter()
        .map(|(id, t)| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect()
}

/// Central differences for every element of every leaf.
pub fn central_differences(f: impl Fn(&[Tensor]) -> f64, leaves: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut out = Vec::new();
    for li in 0..leaves.len() {
        let base = leaves[li].data().to_vec();
        let mut g = vec![0.0; base.len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[k] += h;
            work[li] = Tensor::new(leaves[li].shape().to_vec(), plus).unwrap();
            let fp = f(&work);
            let mut minus = base.clone();
            minus[k] -= h;
            work[li] = Tensor::new(leaves[li].shape().to_vec(), minus).unwrap();
            let fm = f(&work);
            *gk = (fp - fm) / (2.0 * h);
        }
        work[li] = leaves[li].clone();
        out.push(Tensor::new(leaves[li].shape().to_vec(), g).unwrap());
    }
    out
}

/// `max |a − b| / max(max |b|, floor)` over all tensors.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = floor;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            num = num.max((p - q).abs());
            den = den.max(q.abs());
        }
    }
    num / den
}

pub fn uniform(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(lo, hi))
}

/// A smooth random image in `[0, 1]`: a few Gaussian blobs over a ramp.
pub fn smooth_image(rng: &mut RngStream, h: usize, w: usize) -> Tensor {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.uniform_range(0.0, h as f64),
                rng.uniform_range(0.0, w as f64),
                rng.uniform_range(2.0, 6.0),
                rng.uniform_range(0.2, 0.6),
            )
        })
        .collect();
    let ramp = rng.uniform_range(0.0, 0.2);
    let raw = Tensor::from_fn([h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut v = ramp * x / w as f64;
        for (cy, cx, s, a) in &blobs {
            v += a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp();
        }
        v
    });
    raw.map(|v| v.clamp(0.0, 1.0))
}

pub const SHAPE: [usize; 4] = [1, 2, 4, 4];

/// A random graph over the differentiable op set, rooted at a scalar.
pub struct RandomGraph {
    pub graph: Graph,
    pub root: NodeId,
    pub leaves: Vec<(NodeId, Tensor)>,
}

pub fn build_random(ops: &[u8], seed: u64) -> RandomGraph {
    let mut rng = RngStream::new(seed, 1);
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let mut pool = Vec::new();
    for i in 0..2 {
        let id = g.param(format!("x{i}"));
        leaves.push((id, uniform(&mut rng, &SHAPE, -1.0, 1.0)));
        pool.push(id);
    }
    let kernel = g.param("k");
    leaves.push((kernel, uniform(&mut rng, &[2, 2, 3, 3], -0.5, 0.5)));
    let mat = g.param("m");
    leaves.push((mat, uniform(&mut rng, &[4, 4], -0.5, 0.5)));
    let bias = g.param("b");
    leaves.push((bias, uniform(&mut rng, &[1, 2, 1, 1], -0.5, 0.5)));

    for (step, &op) in ops.iter().enumerate() {
        let a = pool[(op as usize / 13 + step) % pool.len()];
        let b = pool[(op as usize / 7 + 1) % pool.len()];
        let next = match op % 13 {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            2 => g.mul(a, b),
            3 => {
                let s = g.sigmoid(b);
                let d = g.affine(s, 1.0, 1.0);
                g.div(a, d)
            }
            4 => g.sigmoid(a),
            5 => g.square(a),
            6 => g.conv2d(a, kernel, None, Padding::Same),
            7 => {
                let p = g.avg_pool2(a);
                g.upsample2(p)
            }
            8 => {
                let p = g.max_pool2(a);
                g.upsample2(p)
            }
            9 => {
                let c = g.concat(&[a, b], 1);
                g.slice(c, 1, 1, 3)
            }
            10 => {
                let r = g.reshape(a, &[8, 4]);
                let m = g.matmul(r, mat);
                g.reshape(m, &SHAPE)
            }
            11 => {
                let bb = g.broadcast_to(bias, &SHAPE);
                g.add(a, bb)
            }
            _ => {
                let r = g.relu(a);
                g.affine(r, 0.5, 0.1)
            }
        };
        pool.push(next);
    }
    let last = *pool.last().expect("pool is never empty");
    let weights = uniform(&mut rng, &SHAPE, -1.0, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(last, w);
    let root = g.sum(prod);
    RandomGraph {
        graph: g,
        root,
        leaves,
    }
}

pub fn check_random(rg: &RandomGraph) -> f64 {
    let analytic = reverse_grads(&rg.graph, rg.root, &rg.leaves);
    let ids: Vec<NodeId> = rg.leaves.iter().map(|(id, _)| *id).collect();
    let values: Vec<Tensor> = rg.leaves.iter().map(|(_, t)| t.clone()).collect();
    let numeric = central_differences(
        |vals| {
            let bound: Vec<(NodeId, Tensor)> =
                ids.iter().copied().zip(vals.iter().cloned()).collect();
            eval_scalar(&rg.graph, rg.root, &bound)
        },
        &values,
        1e-5,
    );
    max_rel_err(&analytic, &numeric, 1e-8)
}

/// Relative error of the diffusion loss gradient of a tiny time-conditioned
/// U-Net against central differences, noise draws held fixed.
pub fn ddpm_gradient_error(seed: u64) -> f64 {
    let cfg = UNetConfig {
        levels: 1,
        base_channels: 2,
        time_conditioned: true,
        time_embedding_dim: 4,
        init: InitScheme::He,
        ..Default::default()
    };
    let sched = make_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let mut rng = RngStream::new(seed, 3);
    let imgs: Vec<Tensor> = (0..3).map(|_| smooth_image(&mut rng, 8, 8)).collect();
    let obj = DdpmObjective::new(&cfg, sched, imgs[..2].to_vec(), imgs[2..].to_vec()).unwrap();
    let mut params = cfg.init_params(&mut rng).unwrap();
    // break the zero output layer so every gradient path is live
    for t in params.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    }
    let noise = RngStream::new(seed, 4);
    let batch = [0usize, 1];
    let (_, analytic) = obj
        .loss_and_grad(&params, &batch, &mut noise.clone())
        .unwrap();
    let names: Vec<String> = params.names().iter().map(|n| n.to_string()).collect();
    let values: Vec<Tensor> = params.tensors().cloned().collect();
    let numeric = central_differences(
        |vals| {
            let mut p = params.clone();
            for (n, v) in names.iter().zip(vals) {
                *p.get_mut(n).unwrap() = v.clone();
            }
            obj.loss_and_grad(&p, &batch, &mut noise.clone()).unwrap().0
        },
        &values,
        1e-5,
    );
    max_rel_err(&analytic, &numeric, 1e-8)
}
