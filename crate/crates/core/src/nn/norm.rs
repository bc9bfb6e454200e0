//! Instance and layer normalization with biased (population) variance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: Tensor,
    pub offset: Tensor,
    pub eps: f64,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self { gain: Tensor::ones([channels]), offset: Tensor::zeros([channels]), eps: NORM_EPS }
    }
}

/// Standardizes `len`-element groups in place and returns `1/σ` per group.
fn standardize(data: &mut [f64], len: usize, eps: f64) -> Vec<f64> {
    data.chunks_mut(len)
        .map(|g| {
            let mean = g.iter().sum::<f64>() / len as f64;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            g.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv
        })
        .collect()
}

/// Backward of `x̂ = (x−μ)/σ` for one group given `dL/dx̂`.
fn standardize_backward(xhat: &[f64], dxhat: &[f64], inv: f64, out: &mut [f64]) {
    let n = xhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for ((o, &d), &x) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv * (d - mean_d - x * mean_dx);
    }
}

fn check_affine(gain: &Tensor, offset: &Tensor, c: usize, eps: f64) -> Result<()> {
    if gain.shape() != [c] || offset.shape() != [c] {
        return Err(Error::shape(format!(
            "norm gain/offset {:?}/{:?}, expected [{c}]",
            gain.shape(),
            offset.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("norm eps must be positive, got {eps}")));
    }
    Ok(())
}

fn nchw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(format!("instance_norm needs N×C×H×W, got {:?}", x.shape()))),
    }
}

/// Per-(sample, channel) standardization over the spatial extent, then
/// per-channel gain and offset.
pub fn instance_norm(x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, hw) = nchw(x)?;
    check_affine(gain, offset, c, eps)?;
    let mut out = x.clone();
    standardize(out.data_mut(), hw, eps);
    for (gi, group) in out.data_mut().chunks_mut(hw).enumerate() {
        let (g, b) = (gain.data()[gi % c], offset.data()[gi % c]);
        group.iter_mut().for_each(|v| *v = g * *v + b);
    }
    Ok(out)
}

/// Gradients of [`instance_norm`] w.r.t. input, gain and offset.
pub fn instance_norm_backward(x: &Tensor, gain: &Tensor, grad_out: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c, hw) = nchw(x)?;
    let mut xhat = x.clone();
    let inv = standardize(xhat.data_mut(), hw, eps);
    let mut gx = Tensor::zeros_like(x);
    let mut ggain = vec![0.0; c];
    let mut goff = vec![0.0; c];
    let mut dxhat = vec![0.0; hw];
    for (gi, (xh, go)) in xhat.data().chunks(hw).zip(grad_out.data().chunks(hw)).enumerate() {
        let ci = gi % c;
        let g = gain.data()[ci];
        for ((d, &o), &xv) in dxhat.iter_mut().zip(go).zip(xh) {
            *d = o * g;
            ggain[ci] += o * xv;
            goff[ci] += o;
        }
        standardize_backward(xh, &dxhat, inv[gi], &mut gx.data_mut()[gi * hw..(gi + 1) * hw]);
    }
    Ok((gx, Tensor::vector(&ggain), Tensor::vector(&goff)))
}

fn last_dim(x: &Tensor) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::shape("layer_norm on a scalar"))
}

/// Standardization over the last axis of each token, then gain/offset.
pub fn layer_norm(x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
    let d = last_dim(x)?;
    check_affine(gain, offset, d, eps)?;
    let mut out = x.clone();
    standardize(out.data_mut(), d, eps);
    for row in out.data_mut().chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(offset.data()) {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

pub fn layer_norm_backward(x: &Tensor, gain: &Tensor, grad_out: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let d = last_dim(x)?;
    let mut xhat = x.clone();
    let inv = standardize(xhat.data_mut(), d, eps);
    let mut gx = Tensor::zeros_like(x);
    let mut ggain = vec![0.0; d];
    let mut goff = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, (xh, go)) in xhat.data().chunks(d).zip(grad_out.data().chunks(d)).enumerate() {
        for i in 0..d {
            dxhat[i] = go[i] * gain.data()[i];
            ggain[i] += go[i] * xh[i];
            goff[i] += go[i];
        }
        standardize_backward(xh, &dxhat, inv[r], &mut gx.data_mut()[r * d..(r + 1) * d]);
    }
    Ok((gx, Tensor::vector(&ggain), Tensor::vector(&goff)))
}

/// Scales each row (last axis) to unit Euclidean length:
/// `x / sqrt(‖x‖² + eps)`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = last_dim(x)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("l2_normalize needs eps > 0, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let r = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        row.iter_mut().for_each(|v| *v /= r);
    }
    Ok(out)
}

/// `dx = (g − y·(y·g)) / r` with `r = sqrt(‖x‖² + eps)` and `y = x / r`.
pub fn l2_normalize_backward(x: &Tensor, grad_out: &Tensor, eps: f64) -> Result<Tensor> {
    let d = last_dim(x)?;
    let mut gx = Tensor::zeros_like(x);
    for ((xr, gr), out) in x.data().chunks(d).zip(grad_out.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)) {
        let inv = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        let yg: f64 = xr.iter().zip(gr).map(|(x, g)| x * inv * g).sum();
        for ((o, &xv), &g) in out.iter_mut().zip(xr).zip(gr) {
            *o = (g - xv * inv * yg) * inv;
        }
    }
    Ok(gx)
}
