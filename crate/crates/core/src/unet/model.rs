use super::config::NetworkConfig;
use crate::autodiff::{Eager, Exec};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvGeometry, LEAKY_SLOPE, NORM_EPS};
use crate::tensor::{Rng, Tensor};
use crate::ttt::{ttt_scan_views, InnerModel, InnerWeights};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat, ordered list of named parameter tensors.
///
/// Layer structures refer to their weights by [`ParamId`], so the same
/// architecture can run on plain tensors or on tape nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvRef {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormRef {
    pub gain: ParamId,
    pub offset: ParamId,
}

/// Token-space affine map `x·Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRef {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// conv → IN → LeakyReLU, twice, plus an identity or 1×1 shortcut.
///
/// The two 3×3 convolutions carry no bias: the instance norm that follows
/// each of them removes any per-channel constant.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: ConvRef,
    pub norm1: NormRef,
    pub conv2: ConvRef,
    pub norm2: NormRef,
    pub projection: Option<ConvRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TttBlockParams {
    pub res1: ResidualBlockParams,
    pub res2: ResidualBlockParams,
    pub pre_norm: NormRef,
    pub lin_v: LinearRef,
    pub lin_k: LinearRef,
    pub lin_q: LinearRef,
    /// Causal depthwise kernels, `D × kt`.
    pub conv_k: ParamId,
    pub conv_q: ParamId,
    pub gate: LinearRef,
    pub w0: InnerWeights<ParamId>,
    pub post_norm: NormRef,
    pub out_lin: LinearRef,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageBlock {
    Residual(ResidualBlockParams, ResidualBlockParams),
    Ttt(Box<TttBlockParams>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    /// Strided 3×3 convolution into this stage; absent for stage 0.
    pub down: Option<ConvRef>,
    pub block: StageBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    /// Transposed convolution, kernel = stride.
    pub up: ConvRef,
    /// Fuses `[upsampled, skip]` back to the skip's channel count.
    pub block: ResidualBlockParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: NetworkConfig,
    pub encoder: Vec<EncoderStage>,
    /// Deepest first: `decoder[j]` goes from stage `S−1−j` to `S−2−j`.
    pub decoder: Vec<DecoderStage>,
    pub head: ConvRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub params: ParamStore,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let t = self.rng.normal_tensor(shape, 0.0, std)?;
        Ok(self.store.push(name, t))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: (usize, usize), geometry: ConvGeometry, bias: bool) -> Result<ConvRef> {
        let fan_in = (c_in * k.0 * k.1) as f64;
        let weight = self.normal(format!("{name}.weight"), vec![c_out, c_in, k.0, k.1], (2.0 / fan_in).sqrt())?;
        let bias = bias.then(|| self.store.push(format!("{name}.bias"), Tensor::zeros([c_out])));
        Ok(ConvRef { weight, bias, geometry })
    }

    fn norm(&mut self, name: &str, c: usize) -> NormRef {
        NormRef {
            gain: self.store.push(format!("{name}.gain"), Tensor::ones([c])),
            offset: self.store.push(format!("{name}.offset"), Tensor::zeros([c])),
        }
    }

    fn linear(&mut self, name: &str, d: usize) -> Result<LinearRef> {
        Ok(LinearRef {
            weight: self.normal(format!("{name}.weight"), vec![d, d], 1.0 / (d as f64).sqrt())?,
            bias: self.store.push(format!("{name}.bias"), Tensor::zeros([d])),
        })
    }

    fn residual(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<ResidualBlockParams> {
        let same = ConvGeometry::new((1, 1), (1, 1));
        Ok(ResidualBlockParams {
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, (3, 3), same, false)?,
            norm1: self.norm(&format!("{name}.norm1"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, (3, 3), same, false)?,
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            projection: if c_in == c_out {
                None
            } else {
                Some(self.conv(&format!("{name}.proj"), c_in, c_out, (1, 1), ConvGeometry::UNIT, true)?)
            },
        })
    }

    fn causal_kernel(&mut self, name: String, d: usize, kt: usize) -> ParamId {
        let mut k = Tensor::zeros([d, kt]);
        for row in k.data_mut().chunks_mut(kt) {
            row[kt - 1] = 1.0;
        }
        self.store.push(name, k)
    }

    fn ttt_block(&mut self, name: &str, c_in: usize, d: usize, cfg: &NetworkConfig) -> Result<TttBlockParams> {
        let res1 = self.residual(&format!("{name}.res1"), c_in, d)?;
        let res2 = self.residual(&format!("{name}.res2"), d, d)?;
        let pre_norm = self.norm(&format!("{name}.pre_norm"), d);
        let lin_v = self.linear(&format!("{name}.lin_v"), d)?;
        let lin_k = self.linear(&format!("{name}.lin_k"), d)?;
        let lin_q = self.linear(&format!("{name}.lin_q"), d)?;
        let conv_k = self.causal_kernel(format!("{name}.conv_k"), d, cfg.ttt.conv_kernel);
        let conv_q = self.causal_kernel(format!("{name}.conv_q"), d, cfg.ttt.conv_kernel);
        let gate = self.linear(&format!("{name}.gate"), d)?;
        let w0 = InnerModel::init(cfg.ttt.inner_model, d, self.rng)?;
        let names = match &w0 {
            InnerWeights::Linear { .. } => vec!["w"],
            InnerWeights::Mlp { .. } => vec!["w1", "b1", "w2", "b2"],
        };
        let mut names = names.into_iter();
        let w0 = w0.map(|t| self.store.push(format!("{name}.w0.{}", names.next().unwrap_or("w")), t.clone()));
        let post_norm = self.norm(&format!("{name}.post_norm"), d);
        let out_lin = self.linear(&format!("{name}.out_lin"), d)?;
        Ok(TttBlockParams { res1, res2, pre_norm, lin_v, lin_k, lin_q, conv_k, conv_q, gate, w0, post_norm, out_lin })
    }
}

/// Allocates and initializes every parameter of the network described by
/// `cfg`. Initialization consumes `rng` in a fixed order.
pub fn build_model(cfg: &NetworkConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    if cfg.patch_size.len() != 2 {
        return Err(Error::UnsupportedRank(format!(
            "only 2-D networks can be built; patch_size {:?} has rank {}",
            cfg.patch_size,
            cfg.patch_size.len()
        )));
    }
    let mut b = Builder { store: ParamStore::default(), rng };
    let mut encoder = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let c = cfg.channels(s);
        let (down, c_in) = if s == 0 {
            (None, cfg.input_channels)
        } else {
            let st = cfg.stride(s);
            let g = ConvGeometry::new((st[0], st[1]), (1, 1));
            (Some(b.conv(&format!("enc.{s}.down"), cfg.channels(s - 1), c, (3, 3), g, true)?), c)
        };
        let block = if cfg.variant.has_ttt_at(s, cfg.stages) {
            StageBlock::Ttt(Box::new(b.ttt_block(&format!("enc.{s}.ttt"), c_in, c, cfg)?))
        } else {
            StageBlock::Residual(b.residual(&format!("enc.{s}.res1"), c_in, c)?, b.residual(&format!("enc.{s}.res2"), c, c)?)
        };
        encoder.push(EncoderStage { down, block });
    }
    let mut decoder = Vec::with_capacity(cfg.stages - 1);
    for s in (1..cfg.stages).rev() {
        let (c_deep, c_skip) = (cfg.channels(s), cfg.channels(s - 1));
        let st = cfg.stride(s);
        let name = format!("dec.{}", s - 1);
        // Transposed weight is `in × out × kh × kw`, i.e. a forward conv from
        // the skip width to the deep width.
        let fan_in = c_deep as f64;
        let weight = b.normal(format!("{name}.up.weight"), vec![c_deep, c_skip, st[0], st[1]], (2.0 / fan_in).sqrt())?;
        let bias = b.store.push(format!("{name}.up.bias"), Tensor::zeros([c_skip]));
        let up = ConvRef { weight, bias: Some(bias), geometry: ConvGeometry::new((st[0], st[1]), (0, 0)) };
        let block = b.residual(&format!("{name}.res"), 2 * c_skip, c_skip)?;
        decoder.push(DecoderStage { up, block });
    }
    let c0 = cfg.channels(0);
    let hw = b.normal("head.weight".into(), vec![cfg.num_classes, c0, 1, 1], (1.0 / c0 as f64).sqrt())?;
    let hb = b.store.push("head.bias", Tensor::zeros([cfg.num_classes]));
    let head = ConvRef { weight: hw, bias: Some(hb), geometry: ConvGeometry::UNIT };
    let arch = Architecture { config: cfg.clone(), encoder, decoder, head };
    Ok(ModelParams { arch, params: b.store })
}

fn conv<B: Exec>(b: &mut B, c: &ConvRef, p: &[B::V], x: &B::V) -> Result<B::V> {
    b.conv2d(x, &p[c.weight.0], c.bias.map(|id| &p[id.0]), c.geometry)
}

fn linear<B: Exec>(b: &mut B, l: &LinearRef, p: &[B::V], x: &B::V) -> Result<B::V> {
    let wt = b.transpose(&p[l.weight.0])?;
    let y = b.matmul(x, &wt)?;
    b.add_row_bias(&y, &p[l.bias.0])
}

pub fn residual_block<B: Exec>(b: &mut B, r: &ResidualBlockParams, p: &[B::V], x: &B::V) -> Result<B::V> {
    let act = Activation::LeakyRelu(LEAKY_SLOPE);
    let h = conv(b, &r.conv1, p, x)?;
    let h = b.instance_norm(&h, &p[r.norm1.gain.0], &p[r.norm1.offset.0], NORM_EPS)?;
    let h = b.activation(&h, act);
    let h = conv(b, &r.conv2, p, &h)?;
    let h = b.instance_norm(&h, &p[r.norm2.gain.0], &p[r.norm2.offset.0], NORM_EPS)?;
    let h = b.activation(&h, act);
    let shortcut = match &r.projection {
        Some(c) => conv(b, c, p, x)?,
        None => x.clone(),
    };
    b.add(&h, &shortcut)
}

/// Mixing path of a TTT block on one sample's `T×C` raster token sequence.
pub fn ttt_mix_tokens<B: Exec>(b: &mut B, t: &TttBlockParams, cfg: &NetworkConfig, p: &[B::V], tokens: &B::V) -> Result<B::V> {
    let s = b.layer_norm(tokens, &p[t.pre_norm.gain.0], &p[t.pre_norm.offset.0], NORM_EPS)?;
    let v = linear(b, &t.lin_v, p, &s)?;
    let k = linear(b, &t.lin_k, p, &s)?;
    let k = b.causal_conv(&k, &p[t.conv_k.0])?;
    // Unit-length keys keep the inner step contractive: 2η‖k‖² = 2η.
    let k = b.l2_normalize(&k, NORM_EPS)?;
    let q = linear(b, &t.lin_q, p, &s)?;
    let q = b.causal_conv(&q, &p[t.conv_q.0])?;
    let g = linear(b, &t.gate, p, &s)?;
    let g = b.activation(&g, Activation::Silu);
    let w0 = t.w0.map(|id| p[id.0].clone());
    let y = ttt_scan_views(b, &k, &v, &q, &w0, cfg.ttt.eta, cfg.ttt.mode)?;
    let y = b.layer_norm(&y, &p[t.post_norm.gain.0], &p[t.post_norm.offset.0], NORM_EPS)?;
    let gated = b.mul(&y, &g)?;
    linear(b, &t.out_lin, p, &gated)
}

pub fn ttt_block<B: Exec>(b: &mut B, t: &TttBlockParams, cfg: &NetworkConfig, p: &[B::V], x: &B::V) -> Result<B::V> {
    let r = residual_block(b, &t.res1, p, x)?;
    let r = residual_block(b, &t.res2, p, &r)?;
    let &[n, c, h, w] = b.value(&r).shape() else {
        return Err(Error::shape(format!("ttt_block needs N×C×H×W, got {:?}", b.value(&r).shape())));
    };
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = if n == 1 { r.clone() } else { b.narrow(&r, 0, i, 1)? };
        let flat = b.reshape(&xi, vec![c, h * w])?;
        let tokens = b.transpose(&flat)?;
        let o = ttt_mix_tokens(b, t, cfg, p, &tokens)?;
        let o = b.transpose(&o)?;
        outs.push(b.reshape(&o, vec![1, c, h, w])?);
    }
    if outs.len() == 1 {
        Ok(outs.pop().expect("one sample"))
    } else {
        b.concat(&outs, 0)
    }
}

fn check_input(cfg: &NetworkConfig, shape: &[usize]) -> Result<()> {
    let ok = shape.len() == 4 && shape[0] >= 1 && shape[1] == cfg.input_channels && shape[2..] == cfg.patch_size[..];
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "network input {:?}, expected N×{}×{}×{}",
            shape, cfg.input_channels, cfg.patch_size[0], cfg.patch_size[1]
        )))
    }
}

/// Encoder features per stage, shallowest first.
pub fn encode<B: Exec>(b: &mut B, arch: &Architecture, p: &[B::V], x: &B::V) -> Result<Vec<B::V>> {
    check_input(&arch.config, b.value(x).shape())?;
    let mut feats: Vec<B::V> = Vec::with_capacity(arch.encoder.len());
    for stage in &arch.encoder {
        let input = feats.last().unwrap_or(x).clone();
        let h = match &stage.down {
            Some(d) => conv(b, d, p, &input)?,
            None => input,
        };
        let h = match &stage.block {
            StageBlock::Residual(r1, r2) => {
                let h = residual_block(b, r1, p, &h)?;
                residual_block(b, r2, p, &h)?
            }
            StageBlock::Ttt(t) => ttt_block(b, t, &arch.config, p, &h)?,
        };
        feats.push(h);
    }
    Ok(feats)
}

/// Decoder and head applied to encoder features; returns class
/// probabilities.
pub fn decode<B: Exec>(b: &mut B, arch: &Architecture, p: &[B::V], mut feats: Vec<B::V>) -> Result<B::V> {
    let mut h = feats.pop().ok_or_else(|| Error::shape("no encoder features"))?;
    for stage in &arch.decoder {
        let skip = feats.pop().ok_or_else(|| Error::shape("decoder deeper than encoder"))?;
        let up = b.conv_transpose2d(&h, &p[stage.up.weight.0], stage.up.bias.map(|id| &p[id.0]), stage.up.geometry)?;
        let cat = b.concat(&[up, skip], 1)?;
        h = residual_block(b, &stage.block, p, &cat)?;
    }
    let logits = conv(b, &arch.head, p, &h)?;
    b.softmax(&logits, 1)
}

/// Full network: `N×inC×H×W` image batch to `N×classes×H×W` probabilities.
pub fn forward<B: Exec>(b: &mut B, arch: &Architecture, p: &[B::V], x: &B::V) -> Result<B::V> {
    let feats = encode(b, arch, p, x)?;
    decode(b, arch, p, feats)
}

impl ModelParams {
    pub fn config(&self) -> &NetworkConfig {
        &self.arch.config
    }

    /// Inference without recording a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        forward(&mut Eager, &self.arch, self.params.tensors(), x)
    }
}
