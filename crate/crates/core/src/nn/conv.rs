//! 2-D convolution (cross-correlation, zero padding), its adjoint the
//! transposed convolution, and the depthwise causal 1-D convolution used
//! along token sequences.
//!
//! Two implementations of the forward convolution exist: a direct loop
//! ([`conv2d_naive`]) that serves as the reference, and the im2col + GEMM
//! path used everywhere else. They agree to within 1e-12.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and zero padding of a convolution, per spatial axis `(h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry { stride: (1, 1), padding: (0, 0) };

    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Output extent of a forward convolution along one axis.
    fn forward_extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        let padded = input + 2 * p;
        (padded >= k && s >= 1).then(|| (padded - k) / s + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    fn transpose_extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        ((input - 1) * s + k).checked_sub(2 * p).filter(|&e| e >= 1 && s >= 1)
    }
}

/// Weights, bias and geometry of one convolution.
///
/// `weight` is `out_c × in_c × kh × kw`. Used by [`conv_transpose2d`] the
/// same tensor maps `out_c` channels back to `in_c`, and `bias` then has
/// `in_c` entries.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, x_channels_axis_of_weight: usize) -> Result<Dims> {
    if x.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "convolution needs N×C×H×W input and 4-D weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (ws, xs) = (weight.shape(), x.shape());
    if ws[2] == 0 || ws[3] == 0 || xs[1] != ws[x_channels_axis_of_weight] {
        return Err(Error::shape(format!(
            "convolution channel mismatch: input {xs:?}, weight {ws:?}"
        )));
    }
    let o = ws[1 - x_channels_axis_of_weight];
    Ok(Dims { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o, kh: ws[2], kw: ws[3] })
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "bias shape {:?}, expected [{channels}]",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn output_hw(d: &Dims, g: ConvGeometry) -> Result<(usize, usize)> {
    let ho = ConvGeometry::forward_extent(d.h, d.kh, g.stride.0, g.padding.0);
    let wo = ConvGeometry::forward_extent(d.w, d.kw, g.stride.1, g.padding.1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((ho, wo)),
        _ => Err(Error::shape(format!(
            "non-positive convolution output for {}×{} input, kernel {}×{}, {g:?}",
            d.h, d.w, d.kh, d.kw
        ))),
    }
}

/// `C·kh·kw × Ho·Wo` patch matrix of one `C×H×W` sample.
fn im2col(x: &[f64], d: &Dims, c: usize, g: ConvGeometry, ho: usize, wo: usize, cols: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut cols[((ci * d.kh + i) * d.kw + j) * hw_out..][..hw_out];
                for oh in 0..ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        *v = if iw < 0 || iw >= d.w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back onto a `C×H×W` sample (adjoint of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize, g: ConvGeometry, ho: usize, wo: usize, out: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((ci * kh + i) * kw + j) * hw_out..][..hw_out];
                for oh in 0..ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, &v) in row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with optional transposition of the row-major
/// operands; `a` is `m×k` and `b` is `k×n` after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides describe exactly the
    // row-major (or transposed) layouts of the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn add_channel_bias(out: &mut [f64], bias: Option<&Tensor>, n: usize, c: usize, hw: usize) {
    if let Some(b) = bias {
        for s in 0..n {
            for (ci, &bv) in b.data().iter().enumerate().take(c) {
                out[(s * c + ci) * hw..][..hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Reference convolution by direct summation.
pub fn conv2d_naive(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(x, weight, 1)?;
    check_bias(bias, d.o)?;
    let (ho, wo) = output_hw(&d, g)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; d.n * d.o * ho * wo];
    for s in 0..d.n {
        for oc in 0..d.o {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ci in 0..d.c {
                        for i in 0..d.kh {
                            let ih = (oh * g.stride.0 + i) as isize - g.padding.0 as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for j in 0..d.kw {
                                let iw = (ow * g.stride.1 + j) as isize - g.padding.1 as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += wd[((oc * d.c + ci) * d.kh + i) * d.kw + j]
                                    * xd[((s * d.c + ci) * d.h + ih as usize) * d.w + iw as usize];
                            }
                        }
                    }
                    out[((s * d.o + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.o, ho, wo], out))
}

/// 2-D cross-correlation of `N×C×H×W` input with `O×C×kh×kw` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(x, weight, 1)?;
    check_bias(bias, d.o)?;
    let (ho, wo) = output_hw(&d, g)?;
    let ckk = d.c * d.kh * d.kw;
    let hw_out = ho * wo;
    let mut cols = vec![0.0; ckk * hw_out];
    let mut out = vec![0.0; d.n * d.o * hw_out];
    let plane = d.c * d.h * d.w;
    for s in 0..d.n {
        im2col(&x.data()[s * plane..(s + 1) * plane], &d, d.c, g, ho, wo, &mut cols);
        gemm(d.o, ckk, hw_out, weight.data(), false, &cols, false, 0.0, &mut out[s * d.o * hw_out..]);
    }
    add_channel_bias(&mut out, bias, d.n, d.o, hw_out);
    Ok(Tensor::from_parts(vec![d.n, d.o, ho, wo], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor, g: ConvGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, weight, 1)?;
    let (ho, wo) = output_hw(&d, g)?;
    if grad_out.shape() != [d.n, d.o, ho, wo] {
        return Err(Error::shape(format!("conv2d grad shape {:?}", grad_out.shape())));
    }
    let ckk = d.c * d.kh * d.kw;
    let hw_out = ho * wo;
    let plane = d.c * d.h * d.w;
    let mut cols = vec![0.0; ckk * hw_out];
    let mut gw = vec![0.0; d.o * ckk];
    let mut gx = vec![0.0; x.numel()];
    for s in 0..d.n {
        let go = &grad_out.data()[s * d.o * hw_out..(s + 1) * d.o * hw_out];
        im2col(&x.data()[s * plane..(s + 1) * plane], &d, d.c, g, ho, wo, &mut cols);
        gemm(d.o, hw_out, ckk, go, false, &cols, true, 1.0, &mut gw);
        gemm(ckk, d.o, hw_out, weight.data(), true, go, false, 0.0, &mut cols);
        col2im(&cols, d.h, d.w, d.c, d.kh, d.kw, g, ho, wo, &mut gx[s * plane..(s + 1) * plane]);
    }
    let gb = channel_sums(grad_out);
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        gb,
    ))
}

fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; c];
    for si in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += t.data()[(si * c + ci) * hw..][..hw].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Transposed convolution: the adjoint of [`conv2d`] in its input, mapping
/// `N×O×H×W` to `N×C×H'×W'` with `H' = (H−1)·s − 2p + k`.
pub fn conv_transpose2d(y: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(y, weight, 0)?;
    // here d.c = O (input channels), d.o = C (output channels)
    check_bias(bias, d.o)?;
    let hout = ConvGeometry::transpose_extent(d.h, d.kh, g.stride.0, g.padding.0);
    let wout = ConvGeometry::transpose_extent(d.w, d.kw, g.stride.1, g.padding.1);
    let (hout, wout) = match (hout, wout) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "non-positive transposed-convolution output for {:?}, kernel {}×{}, {g:?}",
                y.shape(),
                d.kh,
                d.kw
            )))
        }
    };
    let ckk = d.o * d.kh * d.kw;
    let hw_in = d.h * d.w;
    let mut cols = vec![0.0; ckk * hw_in];
    let out_plane = d.o * hout * wout;
    let mut out = vec![0.0; d.n * out_plane];
    for s in 0..d.n {
        let ys = &y.data()[s * d.c * hw_in..(s + 1) * d.c * hw_in];
        gemm(ckk, d.c, hw_in, weight.data(), true, ys, false, 0.0, &mut cols);
        col2im(&cols, hout, wout, d.o, d.kh, d.kw, g, d.h, d.w, &mut out[s * out_plane..(s + 1) * out_plane]);
    }
    add_channel_bias(&mut out, bias, d.n, d.o, hout * wout);
    Ok(Tensor::from_parts(vec![d.n, d.o, hout, wout], out))
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward(y: &Tensor, weight: &Tensor, grad_out: &Tensor, g: ConvGeometry) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(y, weight, 0)?;
    let gs = grad_out.shape();
    if gs.len() != 4 || gs[0] != d.n || gs[1] != d.o {
        return Err(Error::shape(format!("conv_transpose2d grad shape {gs:?}")));
    }
    // The forward output dims are the "input" dims of the matching conv2d.
    let fwd = Dims { n: d.n, c: d.o, h: gs[2], w: gs[3], o: d.c, kh: d.kh, kw: d.kw };
    let (ho, wo) = output_hw(&fwd, g)?;
    if (ho, wo) != (d.h, d.w) {
        return Err(Error::shape(format!("conv_transpose2d grad shape {gs:?} inconsistent with input {:?}", y.shape())));
    }
    let ckk = d.o * d.kh * d.kw;
    let hw_in = d.h * d.w;
    let g_plane = d.o * gs[2] * gs[3];
    let mut cols = vec![0.0; ckk * hw_in];
    let mut gy = vec![0.0; y.numel()];
    let mut gw = vec![0.0; d.c * ckk];
    for s in 0..d.n {
        im2col(&grad_out.data()[s * g_plane..(s + 1) * g_plane], &fwd, d.o, g, ho, wo, &mut cols);
        let ys = &y.data()[s * d.c * hw_in..(s + 1) * d.c * hw_in];
        gemm(d.c, ckk, hw_in, weight.data(), false, &cols, false, 0.0, &mut gy[s * d.c * hw_in..]);
        gemm(d.c, hw_in, ckk, ys, false, &cols, true, 1.0, &mut gw);
    }
    Ok((
        Tensor::from_parts(y.shape().to_vec(), gy),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        channel_sums(grad_out),
    ))
}

impl Conv2dParams {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.geometry)
    }

    pub fn forward_transposed(&self, y: &Tensor) -> Result<Tensor> {
        conv_transpose2d(y, &self.weight, Some(&self.bias), self.geometry)
    }
}

fn check_causal(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || kernel.rank() != 2 || kernel.shape()[0] != x.shape()[1] {
        return Err(Error::shape(format!(
            "causal conv needs T×D tokens and D×k kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], kernel.shape()[1]))
}

/// Depthwise causal convolution along a `T×D` token sequence:
/// `out[t, d] = Σ_j kernel[d, j] · x[t − (k−1) + j, d]`, with zeros before
/// the first token. Token `t` never sees tokens after it.
pub fn causal_depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (t_len, dim, k) = check_causal(x, kernel)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
            for c in 0..dim {
                out[t * dim + c] += kd[c * k + j] * xd[src * dim + c];
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_len, dim], out))
}

pub fn causal_depthwise_conv1d_backward(x: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t_len, dim, k) = check_causal(x, kernel)?;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; t_len * dim];
    let mut gk = vec![0.0; dim * k];
    for t in 0..t_len {
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
            for c in 0..dim {
                let go = gd[t * dim + c];
                gx[src * dim + c] += kd[c * k + j] * go;
                gk[c * k + j] += xd[src * dim + c] * go;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![t_len, dim], gx),
        Tensor::from_parts(vec![dim, k], gk),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        rng.normal_tensor(shape.to_vec(), 0.0, 1.0).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let x = randn(&mut rng, &[2, 1, 3, 4]);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, None, ConvGeometry::UNIT).unwrap(), x);
        assert_eq!(conv_transpose2d(&x, &w, None, ConvGeometry::UNIT).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_to_nine() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvGeometry::UNIT).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
        assert_eq!(conv2d_naive(&x, &w, None, ConvGeometry::UNIT).unwrap().item(), 9.0);
    }

    #[test]
    fn shape_arithmetic() {
        let g = ConvGeometry::new((2, 2), (0, 0));
        let y = conv2d(&Tensor::ones([1, 1, 4, 4]), &Tensor::ones([1, 1, 2, 2]), None, g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let up = conv_transpose2d(&Tensor::ones([1, 1, 2, 2]), &Tensor::ones([1, 1, 2, 2]), None, g).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert!(conv2d(&Tensor::ones([1, 1, 2, 2]), &Tensor::ones([1, 1, 3, 3]), None, ConvGeometry::UNIT).is_err());
        assert!(conv2d(&Tensor::ones([1, 2, 4, 4]), &Tensor::ones([1, 1, 3, 3]), None, ConvGeometry::UNIT).is_err());
    }

    #[test]
    fn gemm_path_matches_naive() {
        let mut rng = Rng::new(5);
        for &(k, s, p) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 2, 0)] {
            let x = randn(&mut rng, &[2, 3, 7, 6]);
            let w = randn(&mut rng, &[4, 3, k, k]);
            let b = randn(&mut rng, &[4]);
            let g = ConvGeometry::new((s, s), (p, p));
            let fast = conv2d(&x, &w, Some(&b), g).unwrap();
            let slow = conv2d_naive(&x, &w, Some(&b), g).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_identity_grid() {
        let mut rng = Rng::new(11);
        for k in 1..=3 {
            for s in 1..=2 {
                for p in 0..=1 {
                    let g = ConvGeometry::new((s, s), (p, p));
                    // choose x so that conv2d and its transpose are shape-consistent
                    let h_out = 5;
                    let h_in = (h_out - 1) * s + k - 2 * p;
                    let x = randn(&mut rng, &[2, 3, h_in, h_in]);
                    let w = randn(&mut rng, &[4, 3, k, k]);
                    let y = randn(&mut rng, &[2, 4, h_out, h_out]);
                    let cx = conv2d(&x, &w, None, g).unwrap();
                    assert_eq!(cx.shape(), y.shape());
                    let lhs = cx.dot(&y).unwrap();
                    let rhs = x.dot(&conv_transpose2d(&y, &w, None, g).unwrap()).unwrap();
                    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "k={k} s={s} p={p}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn causal_conv_ignores_future_tokens() {
        let mut rng = Rng::new(2);
        let x = randn(&mut rng, &[6, 3]);
        let k = randn(&mut rng, &[3, 3]);
        let y = causal_depthwise_conv1d(&x, &k).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[5 * 3..].iter_mut().for_each(|v| *v += 10.0);
        let y2 = causal_depthwise_conv1d(&x2, &k).unwrap();
        assert_eq!(&y.data()[..15], &y2.data()[..15]);
        // first token only sees itself through the last kernel tap
        for c in 0..3 {
            assert_eq!(y.data()[c], k.data()[c * 3 + 2] * x.data()[c]);
        }
    }
}
