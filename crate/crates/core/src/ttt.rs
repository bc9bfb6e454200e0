//! Test-time training sequence layers.
//!
//! The hidden state of a TTT layer is itself a model `f(·; W)`. For every
//! token the layer takes one gradient step on a self-supervised
//! reconstruction loss and then answers a query with the updated model:
//!
//! ```text
//! W_t = W_{t-1} − η ∇_W ℓ(W_{t-1}; x_t)
//! z_t = f(q_t; W_t)
//! ```
//!
//! With the multi-view loss `ℓ = ‖f(k_t; W) − v_t‖²` the key, value and
//! query views are `k_t = θ_K x_t`, `v_t = θ_V x_t`, `q_t = θ_Q x_t`. The
//! naive loss reconstructs `x_t` from a masked copy of itself.
//!
//! Tokens are `1×D` rows throughout. The inner gradient is built from
//! ordinary tape operations (see [`inner_gradient`]), so an outer backward
//! pass differentiates through every inner update of the unrolled scan
//! without needing second-order machinery. Its agreement with the tape's
//! own gradient of `ℓ` is checked in the tests.

use crate::autodiff::{Eager, Exec};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

/// Default inner learning rate for layer-normalized token features.
pub const DEFAULT_ETA: f64 = 0.1;
/// Standard deviation of the initial inner weights.
pub const W0_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerModelKind {
    #[default]
    Linear,
    /// Two layers, hidden width `4·D`, GELU.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TttVariant {
    Naive,
    #[default]
    Multiview,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// Outer gradients flow through every inner update.
    #[default]
    Differentiable,
    /// Each updated inner model is detached from the tape.
    StopGradient,
}

/// Inner-model weights, generic over the backend's value handle.
#[derive(Clone, Debug, PartialEq)]
pub enum InnerWeights<V> {
    /// `f(u) = W·u`, `W: D×D`.
    Linear { w: V },
    /// `f(u) = W2·gelu(W1·u + b1) + b2`.
    Mlp { w1: V, b1: V, w2: V, b2: V },
}

/// Concrete inner model.
pub type InnerModel = InnerWeights<Tensor>;

impl<V> InnerWeights<V> {
    pub fn kind(&self) -> InnerModelKind {
        match self {
            InnerWeights::Linear { .. } => InnerModelKind::Linear,
            InnerWeights::Mlp { .. } => InnerModelKind::Mlp,
        }
    }

    pub fn tensors(&self) -> Vec<&V> {
        match self {
            InnerWeights::Linear { w } => vec![w],
            InnerWeights::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> InnerWeights<U> {
        match self {
            InnerWeights::Linear { w } => InnerWeights::Linear { w: f(w) },
            InnerWeights::Mlp { w1, b1, w2, b2 } => InnerWeights::Mlp { w1: f(w1), b1: f(b1), w2: f(w2), b2: f(b2) },
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&V) -> Result<U>) -> Result<InnerWeights<U>> {
        Ok(match self {
            InnerWeights::Linear { w } => InnerWeights::Linear { w: f(w)? },
            InnerWeights::Mlp { w1, b1, w2, b2 } => {
                InnerWeights::Mlp { w1: f(w1)?, b1: f(b1)?, w2: f(w2)?, b2: f(b2)? }
            }
        })
    }

    fn zip_try<U, W>(&self, other: &InnerWeights<U>, mut f: impl FnMut(&V, &U) -> Result<W>) -> Result<InnerWeights<W>> {
        match (self, other) {
            (InnerWeights::Linear { w }, InnerWeights::Linear { w: o }) => Ok(InnerWeights::Linear { w: f(w, o)? }),
            (InnerWeights::Mlp { w1, b1, w2, b2 }, InnerWeights::Mlp { w1: o1, b1: c1, w2: o2, b2: c2 }) => {
                Ok(InnerWeights::Mlp { w1: f(w1, o1)?, b1: f(b1, c1)?, w2: f(w2, o2)?, b2: f(b2, c2)? })
            }
            _ => Err(Error::InvalidArgument("inner model kinds differ".into())),
        }
    }
}

impl InnerModel {
    /// Small random initialization for a `dim`-dimensional token space.
    pub fn init(kind: InnerModelKind, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            InnerModelKind::Linear => InnerWeights::Linear { w: rng.normal_tensor([dim, dim], 0.0, W0_INIT_STD)? },
            InnerModelKind::Mlp => InnerWeights::Mlp {
                w1: rng.normal_tensor([4 * dim, dim], 0.0, W0_INIT_STD)?,
                b1: Tensor::zeros([4 * dim]),
                w2: rng.normal_tensor([dim, 4 * dim], 0.0, W0_INIT_STD)?,
                b2: Tensor::zeros([dim]),
            },
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            InnerWeights::Linear { w } => w.shape()[0],
            InnerWeights::Mlp { b2, .. } => b2.numel(),
        }
    }

    /// `f(u; W)` for a single token given as a length-`D` vector.
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        let row = u.reshape([1, u.numel()])?;
        let out = inner_apply(&mut Eager, self, &row)?;
        out.reshape([u.numel()])
    }
}

/// `f(u; W)` for a `1×D` (or `T×D`) row batch.
pub fn inner_apply<B: Exec>(b: &mut B, w: &InnerWeights<B::V>, u: &B::V) -> Result<B::V> {
    match w {
        InnerWeights::Linear { w } => {
            let wt = b.transpose(w)?;
            b.matmul(u, &wt)
        }
        InnerWeights::Mlp { w1, b1, w2, b2 } => {
            let w1t = b.transpose(w1)?;
            let z = b.matmul(u, &w1t)?;
            let z = b.add_row_bias(&z, b1)?;
            let h = b.activation(&z, Activation::Gelu);
            let w2t = b.transpose(w2)?;
            let o = b.matmul(&h, &w2t)?;
            b.add_row_bias(&o, b2)
        }
    }
}

/// Inner loss `‖f(k; W) − v‖²` for `1×D` rows.
pub fn inner_loss<B: Exec>(b: &mut B, w: &InnerWeights<B::V>, k: &B::V, v: &B::V) -> Result<B::V> {
    let pred = inner_apply(b, w, k)?;
    let r = b.sub(&pred, v)?;
    let sq = b.mul(&r, &r)?;
    Ok(b.sum(&sq))
}

/// `∇_W ‖f(k; W) − v‖²` for one `1×D` token, expressed with tape operations
/// so that it is itself differentiable. For the linear model this is
/// `2 (W k − v) kᵀ`.
pub fn inner_gradient<B: Exec>(b: &mut B, w: &InnerWeights<B::V>, k: &B::V, v: &B::V) -> Result<InnerWeights<B::V>> {
    match w {
        InnerWeights::Linear { w } => {
            let wt = b.transpose(w)?;
            let pred = b.matmul(k, &wt)?;
            let r = b.sub(&pred, v)?;
            let r2 = b.scale(&r, 2.0);
            let r2t = b.transpose(&r2)?;
            Ok(InnerWeights::Linear { w: b.matmul(&r2t, k)? })
        }
        InnerWeights::Mlp { w1, b1, w2, b2 } => {
            let hidden = b.value(b1).numel();
            let dim = b.value(b2).numel();
            let w1t = b.transpose(w1)?;
            let z = b.matmul(k, &w1t)?;
            let z = b.add_row_bias(&z, b1)?;
            let h = b.activation(&z, Activation::Gelu);
            let w2t = b.transpose(w2)?;
            let o = b.matmul(&h, &w2t)?;
            let o = b.add_row_bias(&o, b2)?;
            let r = b.sub(&o, v)?;
            let d_o = b.scale(&r, 2.0);
            let d_ot = b.transpose(&d_o)?;
            let g_w2 = b.matmul(&d_ot, &h)?;
            let g_b2 = b.reshape(&d_o, vec![dim])?;
            let d_h = b.matmul(&d_o, w2)?;
            let act_grad = b.gelu_grad(&z);
            let d_z = b.mul(&d_h, &act_grad)?;
            let d_zt = b.transpose(&d_z)?;
            let g_w1 = b.matmul(&d_zt, k)?;
            let g_b1 = b.reshape(&d_z, vec![hidden])?;
            Ok(InnerWeights::Mlp { w1: g_w1, b1: g_b1, w2: g_w2, b2: g_b2 })
        }
    }
}

/// One inner update `W − η·∇`; fails if the gradient is not finite.
pub fn inner_update<B: Exec>(b: &mut B, w: &InnerWeights<B::V>, grad: &InnerWeights<B::V>, eta: f64) -> Result<InnerWeights<B::V>> {
    w.zip_try(grad, |wv, gv| {
        if !b.value(gv).is_finite() {
            return Err(Error::NumericFailure("non-finite inner gradient".into()));
        }
        let step = b.scale(gv, -eta);
        b.add(wv, &step)
    })
}

/// Hyperparameters of a TTT layer that are not learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttSettings {
    pub eta: f64,
    pub variant: TttVariant,
    /// Fraction of coordinates zeroed in the naive variant's corrupted
    /// input.
    pub corruption_ratio: f64,
    pub corruption_seed: u64,
}

impl Default for TttSettings {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA, variant: TttVariant::Multiview, corruption_ratio: 0.5, corruption_seed: 0 }
    }
}

impl TttSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("ttt eta must be a finite non-negative number, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.corruption_ratio) {
            return Err(Error::InvalidConfig(format!(
                "corruption_ratio must lie in [0, 1), got {}",
                self.corruption_ratio
            )));
        }
        Ok(())
    }
}

/// Bernoulli keep-mask of token `t` for the naive variant.
pub fn corruption_mask(settings: &TttSettings, t: usize, dim: usize) -> Tensor {
    let mut rng = Rng::derive(settings.corruption_seed, t as u64);
    let keep = 1.0 - settings.corruption_ratio;
    let data = (0..dim).map(|_| if rng.bernoulli(keep) { 1.0 } else { 0.0 }).collect();
    Tensor::from_parts(vec![1, dim], data)
}

/// Learned parameters of a standalone TTT layer, generic over the handle.
#[derive(Clone, Debug)]
pub struct TttWeights<V> {
    pub theta_k: V,
    pub theta_v: V,
    pub theta_q: V,
    pub w0: InnerWeights<V>,
}

/// A self-contained TTT layer: projections, initial inner model and
/// settings.
#[derive(Clone, Debug)]
pub struct TttLayerParams {
    pub weights: TttWeights<Tensor>,
    pub settings: TttSettings,
}

/// Inner model state during a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct TttScanState {
    pub w: InnerModel,
    pub t: usize,
}

impl TttLayerParams {
    pub fn init(dim: usize, kind: InnerModelKind, settings: TttSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate()?;
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            weights: TttWeights {
                theta_k: rng.normal_tensor([dim, dim], 0.0, std)?,
                theta_v: rng.normal_tensor([dim, dim], 0.0, std)?,
                theta_q: rng.normal_tensor([dim, dim], 0.0, std)?,
                w0: InnerModel::init(kind, dim, rng)?,
            },
            settings,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.theta_k.shape()[0]
    }

    pub fn initial_state(&self) -> TttScanState {
        TttScanState { w: self.weights.w0.clone(), t: 0 }
    }

    /// Self-supervised loss of `w` on token `x` (length `D`) at position `t`.
    pub fn loss(&self, w: &InnerModel, x: &Tensor, t: usize) -> Result<f64> {
        let x = as_row(x, self.dim())?;
        let mut e = Eager;
        let (k, v, _) = token_views(&mut e, &self.weights, &self.settings, &x, t)?;
        Ok(inner_loss(&mut e, w, &k, &v)?.item())
    }

    /// One inner update followed by the query: returns `(z_t, state')`.
    pub fn step(&self, state: &TttScanState, x: &Tensor) -> Result<(Tensor, TttScanState)> {
        let x = as_row(x, self.dim())?;
        let mut e = Eager;
        let (k, v, q) = token_views(&mut e, &self.weights, &self.settings, &x, state.t)?;
        let grad = inner_gradient(&mut e, &state.w, &k, &v)?;
        let w = inner_update(&mut e, &state.w, &grad, self.settings.eta)?;
        let z = inner_apply(&mut e, &w, &q)?;
        Ok((z.reshape([self.dim()])?, TttScanState { w, t: state.t + 1 }))
    }

    /// Full scan over a `T×D` sequence, starting from `W0`.
    pub fn scan(&self, x: &Tensor) -> Result<Tensor> {
        ttt_scan(&mut Eager, x, &self.weights, &self.settings, ScanMode::Differentiable)
    }
}

fn as_row(x: &Tensor, dim: usize) -> Result<Tensor> {
    if x.numel() != dim {
        return Err(Error::shape(format!("token {:?} for a {dim}-dimensional layer", x.shape())));
    }
    x.reshape([1, dim])
}

/// `(k, v, q)` rows for one `1×D` token.
fn token_views<B: Exec>(b: &mut B, w: &TttWeights<B::V>, s: &TttSettings, x: &B::V, t: usize) -> Result<(B::V, B::V, B::V)> {
    let qt = b.transpose(&w.theta_q)?;
    let q = b.matmul(x, &qt)?;
    match s.variant {
        TttVariant::Multiview => {
            let kt = b.transpose(&w.theta_k)?;
            let vt = b.transpose(&w.theta_v)?;
            Ok((b.matmul(x, &kt)?, b.matmul(x, &vt)?, q))
        }
        TttVariant::Naive => {
            let dim = b.value(x).numel();
            let mask = b.constant(corruption_mask(s, t, dim));
            Ok((b.mul(x, &mask)?, x.clone(), q))
        }
    }
}

/// Scan with externally supplied `T×D` key, value and query sequences:
/// the inner model restarts from `w0` and takes one step per row, in row
/// order.
pub fn ttt_scan_views<B: Exec>(
    b: &mut B,
    keys: &B::V,
    values: &B::V,
    queries: &B::V,
    w0: &InnerWeights<B::V>,
    eta: f64,
    mode: ScanMode,
) -> Result<B::V> {
    let shape = b.value(keys).shape().to_vec();
    if shape.len() != 2 || b.value(values).shape() != shape || b.value(queries).shape() != shape {
        return Err(Error::shape(format!(
            "ttt views must share a T×D shape: {:?}, {:?}, {:?}",
            shape,
            b.value(values).shape(),
            b.value(queries).shape()
        )));
    }
    let mut w = w0.clone();
    let mut outputs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let k = b.narrow(keys, 0, t, 1)?;
        let v = b.narrow(values, 0, t, 1)?;
        let q = b.narrow(queries, 0, t, 1)?;
        let grad = inner_gradient(b, &w, &k, &v)?;
        w = inner_update(b, &w, &grad, eta)?;
        if mode == ScanMode::StopGradient {
            w = w.map(|t| b.stop_gradient(t));
        }
        outputs.push(inner_apply(b, &w, &q)?);
    }
    b.concat(&outputs, 0)
}

/// Scan of a standalone layer over a `T×D` token sequence.
pub fn ttt_scan<B: Exec>(b: &mut B, x: &B::V, w: &TttWeights<B::V>, s: &TttSettings, mode: ScanMode) -> Result<B::V> {
    let shape = b.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != b.value(&w.theta_k).shape()[0] {
        return Err(Error::shape(format!(
            "ttt_scan input {:?} for a {:?} layer",
            shape,
            b.value(&w.theta_k).shape()
        )));
    }
    let qt = b.transpose(&w.theta_q)?;
    let queries = b.matmul(x, &qt)?;
    let (keys, values) = match s.variant {
        TttVariant::Multiview => {
            let kt = b.transpose(&w.theta_k)?;
            let vt = b.transpose(&w.theta_v)?;
            (b.matmul(x, &kt)?, b.matmul(x, &vt)?)
        }
        TttVariant::Naive => {
            let masks: Vec<Tensor> = (0..shape[0]).map(|t| corruption_mask(s, t, shape[1])).collect();
            let refs: Vec<&Tensor> = masks.iter().collect();
            let mask = b.constant(Tensor::concat(&refs, 0)?);
            (b.mul(x, &mask)?, x.clone())
        }
    };
    ttt_scan_views(b, &keys, &values, &queries, &w.w0, s.eta, mode)
}

/// Parameters of the recurrent baseline
/// `h_t = σ(θ_h h_{t−1} + θ_x x_t)`, `z_t = φ h_t`.
#[derive(Clone, Debug)]
pub struct RnnParams<V> {
    pub theta_h: V,
    pub theta_x: V,
    pub phi: V,
    pub activation: Activation,
}

/// Runs the recurrent baseline over a `T×D` sequence from `h0` (length `D`).
pub fn rnn_scan<B: Exec>(b: &mut B, x: &B::V, p: &RnnParams<B::V>, h0: &B::V) -> Result<B::V> {
    let shape = b.value(x).shape().to_vec();
    let dim = b.value(&p.theta_h).shape().first().copied().unwrap_or(0);
    let square = |t: &Tensor| t.shape() == [dim, dim];
    if shape.len() != 2
        || shape[1] != dim
        || !square(b.value(&p.theta_h))
        || !square(b.value(&p.theta_x))
        || !square(b.value(&p.phi))
        || b.value(h0).numel() != dim
    {
        return Err(Error::shape(format!(
            "rnn_scan: input {shape:?}, θ_h {:?}, θ_x {:?}, φ {:?}, h0 {:?}",
            b.value(&p.theta_h).shape(),
            b.value(&p.theta_x).shape(),
            b.value(&p.phi).shape(),
            b.value(h0).shape()
        )));
    }
    let th_t = b.transpose(&p.theta_h)?;
    let tx_t = b.transpose(&p.theta_x)?;
    let phi_t = b.transpose(&p.phi)?;
    let mut h = b.reshape(h0, vec![1, dim])?;
    let mut outputs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let xt = b.narrow(x, 0, t, 1)?;
        let a = b.matmul(&h, &th_t)?;
        let c = b.matmul(&xt, &tx_t)?;
        let pre = b.add(&a, &c)?;
        h = b.activation(&pre, p.activation);
        outputs.push(b.matmul(&h, &phi_t)?);
    }
    b.concat(&outputs, 0)
}
