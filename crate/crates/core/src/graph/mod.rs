//! Static expression graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (nodes are appended, so every node's inputs
//! precede it) and then evaluated any number of times against different leaf
//! bindings. Shapes are resolved at evaluation time, so one graph serves any
//! batch size or image size its ops accept.

mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter.
    Param,
    /// Data or constant supplied per evaluation.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding preserving spatial size (odd kernels).
    Same,
    Valid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        name: String,
        kind: LeafKind,
    },
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Div,
    Affine {
        scale: f64,
        shift: f64,
    },
    Pow(f64),
    Relu,
    Sigmoid,
    MatMul,
    Conv2d {
        padding: Padding,
    },
    ChannelBias,
    ChannelScale,
    AvgPool2,
    MaxPool2,
    Upsample2,
    Sum,
    Mean,
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Pow(_) => "pow",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias => "channel_bias",
            Op::ChannelScale => "channel_scale",
            Op::AvgPool2 => "avg_pool2",
            Op::MaxPool2 => "max_pool2",
            Op::Upsample2 => "upsample2",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf values for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn with(mut self, leaf: NodeId, value: &'a Tensor) -> Self {
        self.values.insert(leaf, value);
        self
    }
}

/// Cached forward values of one evaluation.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Option<Tensor>>,
}

impl Evaluation {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }
}

/// Gradients of a scalar root with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// `None` when the root does not depend on `leaf`.
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.into(),
                kind: LeafKind::Param,
            },
            vec![],
        )
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.into(),
                kind: LeafKind::Input,
            },
            vec![],
        )
    }

    /// All leaves in creation order.
    pub fn leaves(&self) -> Vec<(NodeId, &str, LeafKind)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name, kind } => Some((NodeId(i), name.as_str(), *kind)),
                _ => None,
            })
            .collect()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves()
            .into_iter()
            .find(|(_, n, _)| *n == name)
            .map(|(id, _, _)| id)
    }

    /// A fixed value baked into the graph; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div, vec![a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { scale, shift }, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn pow(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(exponent), vec![x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.pow(x, 2.0)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    /// NCHW input, OIHW kernel, stride 1, optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    ) -> NodeId {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(Op::Conv2d { padding }, inputs)
    }

    /// Adds a `[B, C]` tensor to every pixel of a `[B, C, H, W]` tensor.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::ChannelBias, vec![x, bias])
    }

    /// Multiplies every pixel of a `[B, C, H, W]` tensor by a `[B, C]` tensor.
    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        self.push(Op::ChannelScale, vec![x, scale])
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::AvgPool2, vec![x])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2, vec![x])
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x])
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::BroadcastTo(shape.to_vec()), vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, vec![x])
    }

    fn reachable(&self, root: NodeId) -> Result<Vec<bool>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "node {} not in graph",
                root.0
            )));
        }
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if live[i] {
                for inp in &self.nodes[i].inputs {
                    live[inp.0] = true;
                }
            }
        }
        Ok(live)
    }

    /// Evaluates every node the root depends on and keeps all values.
    pub fn forward(&self, root: NodeId, bindings: &Bindings) -> Result<Evaluation> {
        let live = self.reachable(root)?;
        let mut values: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        for i in 0..=root.0 {
            if !live[i] {
                continue;
            }
            let node = &self.nodes[i];
            let v = match &node.op {
                Op::Leaf { name, .. } => (*bindings
                    .values
                    .get(&NodeId(i))
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?)
                .clone(),
                op => {
                    let ins: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|j| values[j.0].as_ref().expect("topological order"))
                        .collect();
                    apply(op, &ins)?
                }
            };
            v.check_finite(node.op.name())?;
            values[i] = Some(v);
        }
        Ok(Evaluation { values })
    }

    /// Forward value of `root`.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Tensor> {
        let mut ev = self.forward(root, bindings)?;
        Ok(ev.values[root.0].take().expect("root evaluated"))
    }

    /// Value of a scalar root and its gradient with respect to every leaf it
    /// depends on.
    pub fn gradient(&self, root: NodeId, bindings: &Bindings) -> Result<(f64, Gradients)> {
        let ev = self.forward(root, bindings)?;
        let value = ev.values[root.0].as_ref().expect("root evaluated");
        if value.len() != 1 {
            return Err(Error::shape(
                "gradient",
                format!("root must be scalar, got {:?}", value.shape()),
            ));
        }
        let loss = value.data()[0];
        let grads = self.backward(root, &ev)?;
        Ok((loss, grads))
    }

    fn backward(&self, root: NodeId, ev: &Evaluation) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let rshape = ev.values[root.0].as_ref().expect("root").shape().to_vec();
        adj[root.0] = Some(Tensor::full(rshape, 1.0));
        let mut grads = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads.insert(NodeId(i), g);
                continue;
            }
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|j| ev.values[j.0].as_ref().expect("forward value"))
                .collect();
            let out = ev.values[i].as_ref().expect("forward value");
            let local = vjp(&node.op, &ins, out, &g)?;
            for (inp, gi) in node.inputs.iter().zip(local) {
                gi.check_finite(node.op.name())?;
                adj[inp.0] = Some(match adj[inp.0].take() {
                    Some(acc) => acc.zip_map(&gi, |a, b| a + b)?,
                    None => gi,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

fn pad_for(padding: Padding, kernel: &Tensor) -> usize {
    match padding {
        Padding::Same => kernel.shape().get(2).map_or(0, |k| k / 2),
        Padding::Valid => 0,
    }
}

fn apply(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    use kernels::*;
    match op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not applied"),
        Op::Constant(v) => Ok(v.clone()),
        Op::Add => binary(x[0], x[1], "add", |a, b| a + b),
        Op::Sub => binary(x[0], x[1], "sub", |a, b| a - b),
        Op::Mul => binary(x[0], x[1], "mul", |a, b| a * b),
        Op::Div => binary(x[0], x[1], "div", |a, b| a / b),
        Op::Affine { scale, shift } => Ok(x[0].map(|v| scale * v + shift)),
        Op::Pow(p) => Ok(x[0].map(|v| powf(v, *p))),
        Op::Relu => Ok(x[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Sigmoid => Ok(x[0].map(sigmoid)),
        Op::MatMul => matmul(x[0], x[1]),
        Op::Conv2d { padding } => {
            if *padding == Padding::Same && x[1].shape().get(2).is_some_and(|k| k % 2 == 0) {
                return Err(Error::shape("conv2d", "same padding needs an odd kernel"));
            }
            conv2d(x[0], x[1], x.get(2).copied(), pad_for(*padding, x[1]))
        }
        Op::ChannelBias => channel_bias(x[0], x[1]),
        Op::ChannelScale => channel_scale(x[0], x[1]),
        Op::AvgPool2 => pool2(x[0], false),
        Op::MaxPool2 => pool2(x[0], true),
        Op::Upsample2 => upsample2(x[0]),
        Op::Sum => Ok(Tensor::scalar(x[0].sum())),
        Op::Mean => {
            if x[0].is_empty() {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(x[0].mean()))
        }
        Op::BroadcastTo(shape) => expand(x[0], shape),
        Op::Reshape(shape) => x[0].clone().reshape(shape.clone()),
        Op::Concat { axis } => concat(x, *axis),
        Op::Slice { axis, start, end } => slice_axis(x[0], *axis, *start, *end),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn powf(v: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}

/// Vector-Jacobian products: gradient contributions for each input.
fn vjp(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    use kernels::*;
    let red = |t: Tensor, to: &Tensor| reduce_to(&t, to.shape());
    Ok(match op {
        Op::Leaf { .. } | Op::Constant(_) => vec![],
        Op::Add => vec![red(g.clone(), x[0])?, red(g.clone(), x[1])?],
        Op::Sub => vec![red(g.clone(), x[0])?, red(g.map(|v| -v), x[1])?],
        Op::Mul => {
            let a = expand(x[0], g.shape())?;
            let b = expand(x[1], g.shape())?;
            vec![
                red(g.zip_map(&b, |g, b| g * b)?, x[0])?,
                red(g.zip_map(&a, |g, a| g * a)?, x[1])?,
            ]
        }
        Op::Div => {
            let a = expand(x[0], g.shape())?;
            let b = expand(x[1], g.shape())?;
            let ga = g.zip_map(&b, |g, b| g / b)?;
            let gb = ga
                .zip_map(&a, |gab, a| gab * a)?
                .zip_map(&b, |v, b| -v / b)?;
            vec![red(ga, x[0])?, red(gb, x[1])?]
        }
        Op::Affine { scale, .. } => vec![g.map(|v| scale * v)],
        Op::Pow(p) => vec![g.zip_map(x[0], |g, v| g * p * powf(v, p - 1.0))?],
        // subgradient 0 at exactly zero
        Op::Relu => vec![g.zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 })?],
        Op::Sigmoid => vec![g.zip_map(out, |g, s| g * s * (1.0 - s))?],
        Op::MatMul => {
            let (ga, gb) = matmul_backward(x[0], x[1], g)?;
            vec![ga, gb]
        }
        Op::Conv2d { padding } => {
            let (gx, gw, gb) =
                conv2d_backward(x[0], x[1], x.len() == 3, pad_for(*padding, x[1]), g)?;
            let mut v = vec![gx, gw];
            v.extend(gb);
            v
        }
        Op::ChannelBias => vec![g.clone(), channel_bias_backward(x[0], g)?],
        Op::ChannelScale => {
            let gs = channel_bias_backward(x[0], &g.zip_map(x[0], |a, b| a * b)?)?;
            vec![channel_scale(g, x[1])?, gs]
        }
        Op::AvgPool2 => vec![pool2_backward(x[0], g, false)?],
        Op::MaxPool2 => vec![pool2_backward(x[0], g, true)?],
        Op::Upsample2 => vec![upsample2_backward(x[0], g)?],
        Op::Sum => vec![Tensor::full(x[0].shape().to_vec(), g.data()[0])],
        Op::Mean => vec![Tensor::full(
            x[0].shape().to_vec(),
            g.data()[0] / x[0].len() as f64,
        )],
        Op::BroadcastTo(_) => vec![red(g.clone(), x[0])?],
        Op::Reshape(_) => vec![g.clone().reshape(x[0].shape().to_vec())?],
        Op::Concat { axis } => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(x.len());
            for xi in x {
                let len = xi.shape()[*axis];
                parts.push(slice_axis(g, *axis, start, start + len)?);
                start += len;
            }
            parts
        }
        Op::Slice { axis, start, end } => {
            vec![slice_axis_backward(x[0].shape(), *axis, *start, *end, g)?]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_derivative() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.mul(x, x);
        let xv = Tensor::scalar(3.0);
        let b = Bindings::new().with(x, &xv);
        assert_eq!(g.evaluate(y, &b).unwrap().item().unwrap(), 9.0);
        let (v, grads) = g.gradient(y, &b).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let r = g.relu(x);
        let s = g.sum(r);
        let xv = Tensor::new([3], vec![-1.0, 2.0, 0.0]).unwrap();
        let b = Bindings::new().with(x, &xv);
        assert_eq!(g.evaluate(r, &b).unwrap().data(), &[0.0, 2.0, 0.0]);
        let (_, grads) = g.gradient(s, &b).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_with_unit_kernel_doubles() {
        let mut g = Graph::new();
        let x = g.input("x");
        let k = g.param("k");
        let y = g.conv2d(x, k, None, Padding::Same);
        let xv = Tensor::new(
            [1, 1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let kv = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let out = g
            .evaluate(y, &Bindings::new().with(x, &xv).with(k, &kv))
            .unwrap();
        assert_eq!(out.data(), xv.map(|v| 2.0 * v).data());
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let s = g.add(x, y);
        let a = Tensor::zeros([2]);
        let c = Tensor::zeros([3]);
        assert!(matches!(
            g.evaluate(s, &Bindings::new().with(x, &a)),
            Err(Error::UnboundLeaf(_))
        ));
        assert!(matches!(
            g.evaluate(s, &Bindings::new().with(x, &a).with(y, &c)),
            Err(Error::Shape { .. })
        ));
        let d = g.div(x, y);
        let z = Tensor::zeros([2]);
        assert!(matches!(
            g.evaluate(d, &Bindings::new().with(x, &a).with(y, &z)),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            g.gradient(s, &Bindings::new().with(x, &a).with(y, &a)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn unreachable_leaves_need_no_binding() {
        let mut g = Graph::new();
        let x = g.input("x");
        let _unused = g.input("unused");
        let y = g.scale(x, 2.0);
        let xv = Tensor::scalar(1.5);
        assert_eq!(
            g.evaluate(y, &Bindings::new().with(x, &xv))
                .unwrap()
                .item()
                .unwrap(),
            3.0
        );
    }

    #[test]
    fn evaluate_is_pure() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sigmoid(x);
        let m = g.mean(s);
        let xv = Tensor::from_fn([16], |i| i as f64 * 0.37 - 3.0);
        let b = Bindings::new().with(x, &xv);
        let a = g.evaluate(m, &b).unwrap().item().unwrap();
        let c = g.evaluate(m, &b).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), c.to_bits());
    }
}
