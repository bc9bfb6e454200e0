use crate::error::{Error, Result};
use crate::nn::activation::{self, Activation};
use crate::nn::{conv, norm, ConvGeometry};
use crate::tensor::{expand_reduced, reduction_index_map, Axes, Reduce, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Neg,
    MatMul,
    Reduce,
    Reshape,
    Permute,
    Concat,
    Narrow,
    AddRowBias,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    LayerNorm,
    L2Normalize,
    Activation,
    GeluGrad,
    Softmax,
    Log,
    CausalConv,
    StopGradient,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Neg,
        OpKind::MatMul,
        OpKind::Reduce,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::AddRowBias,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::InstanceNorm,
        OpKind::LayerNorm,
        OpKind::L2Normalize,
        OpKind::Activation,
        OpKind::GeluGrad,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::CausalConv,
        OpKind::StopGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Neg => "neg",
            OpKind::MatMul => "matmul",
            OpKind::Reduce => "reduce",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Activation => "activation",
            OpKind::GeluGrad => "gelu_grad",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::CausalConv => "causal_conv",
            OpKind::StopGradient => "stop_gradient",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Reduce { x: NodeId, op: Reduce, axes: Axes },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize },
    AddRowBias { x: NodeId, bias: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, g: ConvGeometry },
    ConvTranspose2d { x: NodeId, w: NodeId, b: Option<NodeId>, g: ConvGeometry },
    InstanceNorm { x: NodeId, gain: NodeId, offset: NodeId, eps: f64 },
    LayerNorm { x: NodeId, gain: NodeId, offset: NodeId, eps: f64 },
    L2Normalize { x: NodeId, eps: f64 },
    Activation { x: NodeId, f: Activation },
    GeluGrad(NodeId),
    Softmax { x: NodeId, axis: usize },
    Log { x: NodeId, floor: f64 },
    CausalConv { x: NodeId, kernel: NodeId },
    StopGradient,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Neg(..) => OpKind::Neg,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Activation { .. } => OpKind::Activation,
            Op::GeluGrad(..) => OpKind::GeluGrad,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Log { .. } => OpKind::Log,
            Op::CausalConv { .. } => OpKind::CausalConv,
            Op::StopGradient => OpKind::StopGradient,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation tape.
///
/// Values are computed eagerly as nodes are recorded; [`Graph::backward`]
/// then walks the tape in reverse, accumulating vector-Jacobian products.
/// Nodes only ever reference earlier nodes, so the tape order is a
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zeros when no path exists.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong: every
    /// gradient it passes to its inputs is scaled by `1 + delta`. Used to
    /// check that gradient checking actually catches broken rules.
    pub fn with_fault(kind: OpKind, delta: f64) -> Self {
        Self { nodes: Vec::new(), fault: Some((kind, delta)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.record(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.record(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).add_scalar(s);
        self.record(v, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).neg();
        self.record(v, Op::Neg(a), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reduce(&mut self, x: NodeId, op: Reduce, axes: impl Into<Axes>) -> Result<NodeId> {
        let axes = axes.into();
        let v = self.value(x).reduce(op, axes.clone())?;
        Ok(self.record(v, Op::Reduce { x, op, axes }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.reduce(x, Reduce::Sum, Axes::All).expect("sum over all axes is always valid")
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(x).permute(perm)?;
        Ok(self.record(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.value(x).shape())));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.record(v, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.record(v, Op::Narrow { x, axis, start }, &[x]))
    }

    /// `x[..., d] + bias[d]` for every leading index.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = add_row_bias_value(self.value(x), self.value(bias))?;
        Ok(self.record(v, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, g: ConvGeometry) -> Result<NodeId> {
        let v = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(v, Op::Conv2d { x, w, b, g }, &parents))
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, g: ConvGeometry) -> Result<NodeId> {
        let v = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(v, Op::ConvTranspose2d { x, w, b, g }, &parents))
    }

    pub fn instance_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId, eps: f64) -> Result<NodeId> {
        let v = norm::instance_norm(self.value(x), self.value(gain), self.value(offset), eps)?;
        Ok(self.record(v, Op::InstanceNorm { x, gain, offset, eps }, &[x, gain, offset]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId, eps: f64) -> Result<NodeId> {
        let v = norm::layer_norm(self.value(x), self.value(gain), self.value(offset), eps)?;
        Ok(self.record(v, Op::LayerNorm { x, gain, offset, eps }, &[x, gain, offset]))
    }

    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = norm::l2_normalize(self.value(x), eps)?;
        Ok(self.record(v, Op::L2Normalize { x, eps }, &[x]))
    }

    pub fn activation(&mut self, x: NodeId, f: Activation) -> NodeId {
        let v = self.value(x).map(|t| f.apply(t));
        self.record(v, Op::Activation { x, f }, &[x])
    }

    /// Pointwise derivative of GELU, itself differentiable.
    pub fn gelu_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(activation::gelu_grad);
        self.record(v, Op::GeluGrad(x), &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = activation::softmax(self.value(x), axis)?;
        Ok(self.record(v, Op::Softmax { x, axis }, &[x]))
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = self.value(x).map(|t| t.max(floor).ln());
        self.record(v, Op::Log { x, floor }, &[x])
    }

    pub fn causal_conv(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = conv::causal_depthwise_conv1d(self.value(x), self.value(kernel))?;
        Ok(self.record(v, Op::CausalConv { x, kernel }, &[x, kernel]))
    }

    /// Same value, but no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Narrow { x, axis, start } = node.op {
                // Row slices of long token sequences: accumulate in place
                // instead of materializing a full-size gradient per slice.
                if self.nodes[x.0].requires_grad {
                    let g = match self.fault {
                        Some((OpKind::Narrow, delta)) => g.scale(1.0 + delta),
                        _ => g,
                    };
                    let acc = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.nodes[x.0].value.shape().to_vec()));
                    add_narrow(acc, axis, start, &g);
                }
                continue;
            }
            let mut contributions = self.vjp(node, &g)?;
            if let Some((kind, delta)) = self.fault {
                if kind == node.op.kind() {
                    contributions.iter_mut().for_each(|(_, t)| *t = t.scale(1.0 + delta));
                }
            }
            for (parent, t) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.neg())],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.div(bv)?;
                let gb = g.zip_with(&av.div(&bv.mul(bv)?)?, |g, q| -g * q)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Neg(a) => vec![(*a, g.neg())],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reduce { x, op, axes } => {
                let xv = val(*x);
                let expanded = expand_reduced(g, xv.shape(), axes)?;
                let gx = match op {
                    Reduce::Sum => expanded,
                    Reduce::Mean => {
                        let count = (xv.numel() / g.numel()) as f64;
                        expanded.scale(1.0 / count)
                    }
                    Reduce::Max => max_backward(xv, &node.value, g, axes)?,
                };
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    out.push((*p, g.narrow(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => vec![(*x, scatter_narrow(val(*x).shape(), *axis, *start, g))],
            Op::AddRowBias { x, bias } => {
                let d = val(*bias).numel();
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_parts(vec![d], gb))]
            }
            Op::Conv2d { x, w, b, g: geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), g, *geom)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                out.extend(b.map(|b| (b, gb)));
                out
            }
            Op::ConvTranspose2d { x, w, b, g: geom } => {
                let (gx, gw, gb) = conv::conv_transpose2d_backward(val(*x), val(*w), g, *geom)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                out.extend(b.map(|b| (b, gb)));
                out
            }
            Op::InstanceNorm { x, gain, offset, eps } => {
                let (gx, gg, go) = norm::instance_norm_backward(val(*x), val(*gain), g, *eps)?;
                vec![(*x, gx), (*gain, gg), (*offset, go)]
            }
            Op::LayerNorm { x, gain, offset, eps } => {
                let (gx, gg, go) = norm::layer_norm_backward(val(*x), val(*gain), g, *eps)?;
                vec![(*x, gx), (*gain, gg), (*offset, go)]
            }
            Op::L2Normalize { x, eps } => vec![(*x, norm::l2_normalize_backward(val(*x), g, *eps)?)],
            Op::Activation { x, f } => vec![(*x, g.zip_with(val(*x), |g, t| g * f.derivative(t))?)],
            Op::GeluGrad(x) => vec![(*x, g.zip_with(val(*x), |g, t| g * activation::gelu_grad2(t))?)],
            Op::Softmax { axis, x } => vec![(*x, activation::softmax_backward(&node.value, g, *axis)?)],
            Op::Log { x, floor } => {
                vec![(*x, g.zip_with(val(*x), |g, t| if t > *floor { g / t } else { 0.0 })?)]
            }
            Op::CausalConv { x, kernel } => {
                let (gx, gk) = conv::causal_depthwise_conv1d_backward(val(*x), val(*kernel), g)?;
                vec![(*x, gx), (*kernel, gk)]
            }
        };
        Ok(out)
    }
}

pub(crate) fn add_row_bias_value(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [d] {
        return Err(Error::shape(format!(
            "row bias {:?} for input {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        row.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

fn add_narrow(acc: &mut Tensor, axis: usize, start: usize, g: &Tensor) {
    let shape = acc.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (ext, len) = (shape[axis], g.shape()[axis]);
    let od = acc.data_mut();
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        let src = o * len * inner;
        for (d, s) in od[dst..dst + len * inner].iter_mut().zip(&g.data()[src..src + len * inner]) {
            *d += s;
        }
    }
}

fn scatter_narrow(shape: &[usize], axis: usize, start: usize, g: &Tensor) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (ext, len) = (shape[axis], g.shape()[axis]);
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        let src = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

/// Routes each group's gradient to the first element attaining the max.
fn max_backward(x: &Tensor, maxes: &Tensor, g: &Tensor, axes: &Axes) -> Result<Tensor> {
    let mask = x.resolve_axes(axes)?;
    let map = reduction_index_map(x.shape(), &mask);
    let mut claimed = vec![false; maxes.numel()];
    let mut out = vec![0.0; x.numel()];
    for (i, &o) in map.iter().enumerate() {
        if !claimed[o] && x.data()[i] == maxes.data()[o] {
            claimed[o] = true;
            out[i] = g.data()[o];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
