//! One model definition, two execution backends.
//!
//! Layers are written once against [`Exec`]. Running them on a [`Graph`]
//! records a differentiable tape; running them on [`Eager`] computes plain
//! tensors and keeps nothing, which is what inference on large patches
//! needs.

use super::graph::{add_row_bias_value, Graph, NodeId};
use crate::error::Result;
use crate::nn::activation::{self, Activation};
use crate::nn::{conv, norm, ConvGeometry};
use crate::tensor::{Axes, Reduce, Tensor};

pub trait Exec {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, a: &Self::V, shape: Vec<usize>) -> Result<Self::V>;
    fn permute(&mut self, a: &Self::V, perm: &[usize]) -> Result<Self::V>;
    fn reduce(&mut self, a: &Self::V, op: Reduce, axes: Axes) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn narrow(&mut self, a: &Self::V, axis: usize, start: usize, len: usize) -> Result<Self::V>;
    fn add_row_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeometry) -> Result<Self::V>;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeometry) -> Result<Self::V>;
    fn instance_norm(&mut self, x: &Self::V, gain: &Self::V, offset: &Self::V, eps: f64) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, offset: &Self::V, eps: f64) -> Result<Self::V>;
    fn l2_normalize(&mut self, x: &Self::V, eps: f64) -> Result<Self::V>;
    fn activation(&mut self, x: &Self::V, f: Activation) -> Self::V;
    fn gelu_grad(&mut self, x: &Self::V) -> Self::V;
    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn log(&mut self, x: &Self::V, floor: f64) -> Self::V;
    fn causal_conv(&mut self, x: &Self::V, kernel: &Self::V) -> Result<Self::V>;
    fn stop_gradient(&mut self, x: &Self::V) -> Self::V;

    fn sum(&mut self, a: &Self::V) -> Self::V {
        self.reduce(a, Reduce::Sum, Axes::All).expect("full reduction is always valid")
    }
}

impl Exec for Graph {
    type V = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        Graph::value(self, *v)
    }
    fn constant(&mut self, t: Tensor) -> NodeId {
        Graph::constant(self, t)
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::add(self, *a, *b)
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::mul(self, *a, *b)
    }
    fn div(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::div(self, *a, *b)
    }
    fn scale(&mut self, a: &NodeId, s: f64) -> NodeId {
        Graph::scale(self, *a, s)
    }
    fn add_scalar(&mut self, a: &NodeId, s: f64) -> NodeId {
        Graph::add_scalar(self, *a, s)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::matmul(self, *a, *b)
    }
    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        Graph::transpose(self, *a)
    }
    fn reshape(&mut self, a: &NodeId, shape: Vec<usize>) -> Result<NodeId> {
        Graph::reshape(self, *a, shape)
    }
    fn permute(&mut self, a: &NodeId, perm: &[usize]) -> Result<NodeId> {
        Graph::permute(self, *a, perm)
    }
    fn reduce(&mut self, a: &NodeId, op: Reduce, axes: Axes) -> Result<NodeId> {
        Graph::reduce(self, *a, op, axes)
    }
    fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        Graph::concat(self, parts, axis)
    }
    fn narrow(&mut self, a: &NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        Graph::narrow(self, *a, axis, start, len)
    }
    fn add_row_bias(&mut self, x: &NodeId, bias: &NodeId) -> Result<NodeId> {
        Graph::add_row_bias(self, *x, *bias)
    }
    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, g: ConvGeometry) -> Result<NodeId> {
        Graph::conv2d(self, *x, *w, b.copied(), g)
    }
    fn conv_transpose2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, g: ConvGeometry) -> Result<NodeId> {
        Graph::conv_transpose2d(self, *x, *w, b.copied(), g)
    }
    fn instance_norm(&mut self, x: &NodeId, gain: &NodeId, offset: &NodeId, eps: f64) -> Result<NodeId> {
        Graph::instance_norm(self, *x, *gain, *offset, eps)
    }
    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, offset: &NodeId, eps: f64) -> Result<NodeId> {
        Graph::layer_norm(self, *x, *gain, *offset, eps)
    }
    fn l2_normalize(&mut self, x: &NodeId, eps: f64) -> Result<NodeId> {
        Graph::l2_normalize(self, *x, eps)
    }
    fn activation(&mut self, x: &NodeId, f: Activation) -> NodeId {
        Graph::activation(self, *x, f)
    }
    fn gelu_grad(&mut self, x: &NodeId) -> NodeId {
        Graph::gelu_grad(self, *x)
    }
    fn softmax(&mut self, x: &NodeId, axis: usize) -> Result<NodeId> {
        Graph::softmax(self, *x, axis)
    }
    fn log(&mut self, x: &NodeId, floor: f64) -> NodeId {
        Graph::log(self, *x, floor)
    }
    fn causal_conv(&mut self, x: &NodeId, kernel: &NodeId) -> Result<NodeId> {
        Graph::causal_conv(self, *x, *kernel)
    }
    fn stop_gradient(&mut self, x: &NodeId) -> NodeId {
        Graph::stop_gradient(self, *x)
    }
}

/// Backend that evaluates immediately and records nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Exec for Eager {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }
    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.div(b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }
    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.add_scalar(s)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        a.transpose()
    }
    fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        a.reshape(shape)
    }
    fn permute(&mut self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        a.permute(perm)
    }
    fn reduce(&mut self, a: &Tensor, op: Reduce, axes: Axes) -> Result<Tensor> {
        a.reduce(op, axes)
    }
    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), axis)
    }
    fn narrow(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        a.narrow(axis, start, len)
    }
    fn add_row_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        add_row_bias_value(x, bias)
    }
    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
        conv::conv2d(x, w, b, g)
    }
    fn conv_transpose2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
        conv::conv_transpose2d(x, w, b, g)
    }
    fn instance_norm(&mut self, x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
        norm::instance_norm(x, gain, offset, eps)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
        norm::layer_norm(x, gain, offset, eps)
    }
    fn l2_normalize(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        norm::l2_normalize(x, eps)
    }
    fn activation(&mut self, x: &Tensor, f: Activation) -> Tensor {
        x.map(|t| f.apply(t))
    }
    fn gelu_grad(&mut self, x: &Tensor) -> Tensor {
        x.map(activation::gelu_grad)
    }
    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        activation::softmax(x, axis)
    }
    fn log(&mut self, x: &Tensor, floor: f64) -> Tensor {
        x.map(|t| t.max(floor).ln())
    }
    fn causal_conv(&mut self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        conv::causal_depthwise_conv1d(x, kernel)
    }
    fn stop_gradient(&mut self, x: &Tensor) -> Tensor {
        x.clone()
    }
}
