//! Pointwise activations and the axis softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative slope used by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Silu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => leaky_relu(x, s),
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(s) => leaky_relu_grad(x, s),
            Activation::Silu => silu_grad(x),
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 { x } else { slope * x }
}

/// Exactly at zero the negative branch is used.
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 { 1.0 } else { slope }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Second derivative of [`gelu`]; needed to differentiate through an
/// explicitly built MLP gradient.
pub fn gelu_grad2(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let sech2 = 1.0 - t * t;
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    let d2u = GELU_C * 6.0 * GELU_A * x;
    sech2 * du + 0.5 * x * sech2 * (d2u - 2.0 * t * du * du)
}

fn axis_layout(x: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis { axis, rank: x.rank() });
    }
    let s = x.shape();
    Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
}

/// Softmax over `axis`, stabilized by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, ext, inner) = axis_layout(x, axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    let mut buf = vec![0.0; ext];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * ext + a) * inner + i;
            let m = (0..ext).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = (d[at(a)] - m).exp();
                sum += *b;
            }
            for (a, b) in buf.iter().enumerate() {
                d[at(a)] = b / sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax`] given its output `s`: `s ⊙ (g − Σ g⊙s)`.
pub fn softmax_backward(s: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, ext, inner) = axis_layout(s, axis)?;
    let (sd, gd) = (s.data(), grad_out.data());
    let mut out = vec![0.0; s.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * ext + a) * inner + i;
            let dot: f64 = (0..ext).map(|a| sd[at(a)] * gd[at(a)]).sum();
            for a in 0..ext {
                out[at(a)] = sd[at(a)] * (gd[at(a)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(s.shape().to_vec(), out))
}
