//! Miniature diffusion transformer with scale-aware modulation.
//!
//! Video latents `[C, T, H, W]` become `T*H*W` tokens (patch size 1).
//! Reference feature maps are tokenized per spatial cell and appended to the
//! sequence; a learned type embedding tells the two apart. Every block runs
//! `F + eta * Layer(gamma * LN(F) + beta)` twice, once with attention and once
//! with the feed-forward layer, each with its own adapter head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{AdapterParams, EncoderParams, ModulationParams, PromptEmbedding};
use crate::error::{invalid, shape_err, Error, Result};
use crate::fusion::FusedCondition;
use crate::losses::{fuse_graph, FusionSettings, NoHook};
use crate::ops::{layer_norm, LAYER_NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct DiTConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Latent channels `C`.
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of a preprocessed reference image.
    pub ref_channels: usize,
    pub ref_height: usize,
    pub ref_width: usize,
    /// Reference encoder output channels.
    pub feat_dim: usize,
    /// Prompt embedding width.
    pub emb_dim: usize,
    pub ffn_mult: usize,
    pub adapter_mult: usize,
    /// One adapter pair for all blocks instead of one per block.
    pub shared_adapter: bool,
    /// Reference slots available to the sequential baseline.
    pub max_refs: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 32,
            n_heads: 4,
            channels: 4,
            frames: 4,
            height: 4,
            width: 4,
            ref_channels: 3,
            ref_height: 4,
            ref_width: 4,
            feat_dim: 8,
            emb_dim: 16,
            ffn_mult: 4,
            adapter_mult: 4,
            shared_adapter: false,
            max_refs: 3,
        }
    }
}

impl DiTConfig {
    /// A one-block model small enough for a full finite-difference sweep.
    pub fn gradcheck() -> Self {
        Self {
            depth: 1,
            d_model: 8,
            n_heads: 2,
            channels: 4,
            frames: 2,
            height: 2,
            width: 2,
            ref_channels: 3,
            ref_height: 2,
            ref_width: 2,
            feat_dim: 4,
            emb_dim: 8,
            ffn_mult: 2,
            adapter_mult: 2,
            shared_adapter: false,
            max_refs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("channels", self.channels),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("ref_channels", self.ref_channels),
            ("ref_height", self.ref_height),
            ("ref_width", self.ref_width),
            ("feat_dim", self.feat_dim),
            ("emb_dim", self.emb_dim),
            ("ffn_mult", self.ffn_mult),
            ("adapter_mult", self.adapter_mult),
            ("max_refs", self.max_refs),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(invalid("DiTConfig", format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(
                "DiTConfig",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_ref(&self) -> usize {
        self.ref_height * self.ref_width
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn ref_shape(&self) -> [usize; 3] {
        [self.ref_channels, self.ref_height, self.ref_width]
    }

    fn n_adapters(&self) -> usize {
        if self.shared_adapter {
            2
        } else {
            2 * self.depth
        }
    }
}

/// How reference features enter the sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Conditioner {
    /// One fused map, independent of reference order.
    Fourier(FusionSettings),
    /// Each reference in its own slot, in the order given.
    Sequential,
}

impl Default for Conditioner {
    fn default() -> Self {
        Conditioner::Fourier(FusionSettings::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    FeedForward,
}

/// Parameter initialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Init {
    /// Zero adapter output layers and zero output head: the untrained model
    /// predicts zero and every block starts as the identity.
    #[default]
    Standard,
    /// Every tensor random, biases included.
    Random,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Weight { fan_in: usize },
    Bias,
    Embedding,
    ZeroInit,
}

#[derive(Clone, Debug, PartialEq)]
struct AdapterIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc_w: ParamId,
    enc_b: ParamId,
    video_w: ParamId,
    video_b: ParamId,
    ref_w: ParamId,
    ref_b: ParamId,
    type_emb: ParamId,
    pos: ParamId,
    ref_pos: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    blocks: Vec<BlockIds>,
    adapters: Vec<AdapterIds>,
    head_w: ParamId,
    head_b: ParamId,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: Kind) -> ParamId {
        self.specs.push(Spec { name: name.into(), shape: shape.to_vec(), kind });
        ParamId(self.specs.len() - 1)
    }
}

fn layout(c: &DiTConfig) -> (Layout, Vec<Spec>) {
    let d = c.d_model;
    let mut b = Builder { specs: Vec::new() };
    let enc_w = b.add("encoder.weight", &[c.feat_dim, c.ref_channels, 3, 3], Kind::Weight { fan_in: 9 * c.ref_channels });
    let enc_b = b.add("encoder.bias", &[c.feat_dim], Kind::Bias);
    let video_w = b.add("embed.video_in.weight", &[c.channels, d], Kind::Weight { fan_in: c.channels });
    let video_b = b.add("embed.video_in.bias", &[d], Kind::Bias);
    let ref_w = b.add("embed.ref_in.weight", &[c.feat_dim, d], Kind::Weight { fan_in: c.feat_dim });
    let ref_b = b.add("embed.ref_in.bias", &[d], Kind::Bias);
    let type_emb = b.add("embed.type", &[2, d], Kind::Embedding);
    let pos = b.add("embed.pos", &[c.video_tokens(), d], Kind::Embedding);
    let ref_pos = b.add("embed.ref_pos", &[c.tokens_per_ref(), d], Kind::Embedding);
    let time_w = b.add("time.weight", &[d, d], Kind::Weight { fan_in: d });
    let time_b = b.add("time.bias", &[d], Kind::Bias);
    let hidden = c.ffn_mult * d;
    let mut blocks = Vec::with_capacity(c.depth);
    for i in 0..c.depth {
        let p = format!("blocks.{i}");
        blocks.push(BlockIds {
            wqkv: b.add(format!("{p}.attn.wqkv"), &[d, 3 * d], Kind::Weight { fan_in: d }),
            bqkv: b.add(format!("{p}.attn.bqkv"), &[3 * d], Kind::Bias),
            wo: b.add(format!("{p}.attn.wo"), &[d, d], Kind::Weight { fan_in: d }),
            bo: b.add(format!("{p}.attn.bo"), &[d], Kind::Bias),
            w1: b.add(format!("{p}.ffn.w1"), &[d, hidden], Kind::Weight { fan_in: d }),
            b1: b.add(format!("{p}.ffn.b1"), &[hidden], Kind::Bias),
            w2: b.add(format!("{p}.ffn.w2"), &[hidden, d], Kind::Weight { fan_in: hidden }),
            b2: b.add(format!("{p}.ffn.b2"), &[d], Kind::Bias),
        });
    }
    let ah = c.adapter_mult * d;
    let mut adapters = Vec::with_capacity(c.n_adapters());
    for a in 0..c.n_adapters() {
        let (owner, sub) = if c.shared_adapter { (String::from("shared"), a) } else { (format!("blocks.{}", a / 2), a % 2) };
        let p = format!("{owner}.sca_{}", if sub == 0 { "attn" } else { "ffn" });
        adapters.push(AdapterIds {
            w1: b.add(format!("{p}.w1"), &[c.emb_dim, ah], Kind::Weight { fan_in: c.emb_dim }),
            b1: b.add(format!("{p}.b1"), &[ah], Kind::Bias),
            w2: b.add(format!("{p}.w2"), &[ah, 3 * d], Kind::ZeroInit),
            b2: b.add(format!("{p}.b2"), &[3 * d], Kind::ZeroInit),
        });
    }
    let head_w = b.add("head.weight", &[d, c.channels], Kind::ZeroInit);
    let head_b = b.add("head.bias", &[c.channels], Kind::ZeroInit);
    let l = Layout {
        enc_w,
        enc_b,
        video_w,
        video_b,
        ref_w,
        ref_b,
        type_emb,
        pos,
        ref_pos,
        time_w,
        time_b,
        blocks,
        adapters,
        head_w,
        head_b,
    };
    (l, b.specs)
}

const EMBED_STD: f64 = 0.1;
const RANDOM_ZERO_INIT_STD: f64 = 0.1;

fn init_tensor(spec: &Spec, rng: &mut SeededRng, init: Init) -> Tensor {
    let std = match (spec.kind, init) {
        (Kind::Weight { fan_in }, _) => 1.0 / libm::sqrt(fan_in as f64),
        (Kind::Embedding, _) => EMBED_STD,
        (Kind::Bias | Kind::ZeroInit, Init::Standard) => 0.0,
        (Kind::Bias | Kind::ZeroInit, Init::Random) => RANDOM_ZERO_INIT_STD,
    };
    if std == 0.0 {
        Tensor::zeros(spec.shape.clone())
    } else {
        rng.normal_tensor(&spec.shape).scale(std)
    }
}

/// `[sin(p w_k), cos(p w_k)]` with `w_k = 10000^(-k / (d/2))`; odd widths end with a zero.
pub fn sinusoid(position: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let w = libm::exp(-libm::log(10000.0) * k as f64 / half as f64);
        out[k] = libm::sin(position * w);
        out[half + k] = libm::cos(position * w);
    }
    out
}

/// Timestep features: the sinusoid at `1000 t`.
pub fn timestep_features(t: f64, d: usize) -> Vec<f64> {
    sinusoid(1000.0 * t, d)
}

/// `[C, T, H, W]` to `[T*H*W, C]` tokens.
pub fn patchify(latent: &Tensor) -> Result<Tensor> {
    if latent.ndim() != 4 {
        return Err(shape_err("patchify", format!("latent must be C x T x H x W, got {:?}", latent.shape())));
    }
    let c = latent.shape()[0];
    latent.clone().reshape([c, latent.len() / c])?.transpose2()
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, latent_shape: [usize; 4]) -> Result<Tensor> {
    let [l, c] = tokens.dims2("unpatchify")?;
    if c != latent_shape[0] || l * c != latent_shape.iter().product::<usize>() {
        return Err(shape_err("unpatchify", format!("{:?} tokens for latent {latent_shape:?}", tokens.shape())));
    }
    tokens.transpose2()?.reshape(latent_shape.to_vec())
}

/// `gamma * LayerNorm(F) + beta` over the trailing axis.
pub fn modulate(f: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = f.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err("modulate", format!("gamma {} / beta {} for width {d}", gamma.len(), beta.len())));
    }
    let mut out = layer_norm(f, LAYER_NORM_EPS)?;
    for row in out.data_mut().chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

/// Attention and feed-forward weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wqkv: Tensor,
    pub bqkv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wqkv: Var,
    pub bqkv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    pub fn inputs(tape: &mut Tape, p: &BlockParams) -> Self {
        Self {
            wqkv: tape.input(p.wqkv.clone()),
            bqkv: tape.input(p.bqkv.clone()),
            wo: tape.input(p.wo.clone()),
            bo: tape.input(p.bo.clone()),
            w1: tape.input(p.w1.clone()),
            b1: tape.input(p.b1.clone()),
            w2: tape.input(p.w2.clone()),
            b2: tape.input(p.b2.clone()),
        }
    }
}

/// `(gamma, beta, eta)` on the tape, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ModVars {
    pub gamma: Var,
    pub beta: Var,
    pub eta: Var,
}

impl ModVars {
    pub fn inputs(tape: &mut Tape, m: &ModulationParams) -> Result<Self> {
        let d = m.width();
        Ok(Self {
            gamma: tape.input(m.gamma.clone().reshape([1, d])?),
            beta: tape.input(m.beta.clone().reshape([1, d])?),
            eta: tape.input(m.eta.clone().reshape([1, d])?),
        })
    }
}

/// Multi-head self-attention over the rows of `x`. Also returns each head's
/// attention probabilities.
pub fn mha_graph(tape: &mut Tape, x: Var, b: &BlockVars, n_heads: usize) -> Result<(Var, Vec<Var>)> {
    let [_, d] = tape.value(x).dims2("attention")?;
    if d % n_heads != 0 {
        return Err(shape_err("attention", format!("width {d} over {n_heads} heads")));
    }
    let dh = d / n_heads;
    let qkv = tape.linear(x, b.wqkv, b.bqkv)?;
    let mut outs = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / libm::sqrt(dh as f64));
        let p = tape.softmax_rows(s)?;
        outs.push(tape.matmul(p, v)?);
        probs.push(p);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((tape.linear(cat, b.wo, b.bo)?, probs))
}

pub fn ffn_graph(tape: &mut Tape, x: Var, b: &BlockVars) -> Result<Var> {
    let h = tape.linear(x, b.w1, b.b1)?;
    let h = tape.gelu(h);
    tape.linear(h, b.w2, b.b2)
}

fn modulate_graph(tape: &mut Tape, x: Var, m: &ModVars) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let s = tape.mul_row(n, m.gamma)?;
    tape.add_row(s, m.beta)
}

fn gated_residual(tape: &mut Tape, x: Var, y: Var, m: &ModVars) -> Result<Var> {
    let g = tape.mul_row(y, m.eta)?;
    tape.add(x, g)
}

/// One block on `[L, d]` tokens.
pub fn smo_block_graph(
    tape: &mut Tape,
    x: Var,
    b: &BlockVars,
    n_heads: usize,
    attn: &ModVars,
    ffn: &ModVars,
) -> Result<Var> {
    let h = modulate_graph(tape, x, attn)?;
    let (a, _) = mha_graph(tape, h, b, n_heads)?;
    let x = gated_residual(tape, x, a, attn)?;
    let h = modulate_graph(tape, x, ffn)?;
    let f = ffn_graph(tape, h, b)?;
    gated_residual(tape, x, f, ffn)
}

/// One block on `[L, d]` or `[B, L, d]` tokens.
pub fn smo_block(
    f: &Tensor,
    params: &BlockParams,
    n_heads: usize,
    attn: &ModulationParams,
    ffn: &ModulationParams,
) -> Result<Tensor> {
    let (batch, l, d) = match *f.shape() {
        [l, d] => (1, l, d),
        [b, l, d] => (b, l, d),
        _ => return Err(shape_err("smo_block", format!("tokens must be [L, d] or [B, L, d], got {:?}", f.shape()))),
    };
    if attn.width() != d || ffn.width() != d {
        return Err(shape_err("smo_block", format!("modulation width {} for tokens of width {d}", attn.width())));
    }
    let mut out = Vec::with_capacity(f.len());
    for s in 0..batch {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([l, d], f.data()[s * l * d..(s + 1) * l * d].to_vec())?);
        let bv = BlockVars::inputs(&mut tape, params);
        let am = ModVars::inputs(&mut tape, attn)?;
        let fm = ModVars::inputs(&mut tape, ffn)?;
        let y = smo_block_graph(&mut tape, x, &bv, n_heads, &am, &fm)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Tensor::new(f.shape().to_vec(), out)
}

/// Prediction node plus the encoded reference features it was built from.
#[derive(Clone, Debug)]
pub struct PredictionGraph {
    pub output: Var,
    pub features: Vec<Var>,
}

/// Reference tokens before embedding: feature maps `[feat, h, w]`.
#[derive(Clone, Debug)]
pub enum RefFeatures {
    Fused(Var),
    Slots(Vec<Var>),
}

/// Denoiser, reference encoder and adapters in one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DiTConfig,
    params: ParamStore,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: DiTConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut params = ParamStore::new();
        for s in &specs {
            let mut rng = SeededRng::derive(seed, &s.name, 0);
            params.push(s.name.clone(), init_tensor(s, &mut rng, init));
        }
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: DiTConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        if specs.len() != params.len() {
            return Err(invalid(
                "Denoiser",
                format!("expected {} parameter tensors, found {}", specs.len(), params.len()),
            ));
        }
        for (s, (_, name, t)) in specs.iter().zip(params.iter()) {
            if s.name != name || s.shape != t.shape() {
                return Err(invalid(
                    "Denoiser",
                    format!("parameter {name} {:?} does not match {} {:?}", t.shape(), s.name, s.shape),
                ));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &DiTConfig {
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

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            weight: self.params.get(self.layout.enc_w).clone(),
            bias: self.params.get(self.layout.enc_b).clone(),
        }
    }

    fn adapter_index(&self, block: usize, sub: Sublayer) -> usize {
        let s = match sub {
            Sublayer::Attention => 0,
            Sublayer::FeedForward => 1,
        };
        if self.config.shared_adapter {
            s
        } else {
            2 * block + s
        }
    }

    pub fn adapter_params(&self, block: usize, sub: Sublayer) -> AdapterParams {
        let ids = &self.layout.adapters[self.adapter_index(block, sub)];
        AdapterParams {
            w1: self.params.get(ids.w1).clone(),
            b1: self.params.get(ids.b1).clone(),
            w2: self.params.get(ids.w2).clone(),
            b2: self.params.get(ids.b2).clone(),
        }
    }

    pub fn block_params(&self, block: usize) -> BlockParams {
        let b = &self.layout.blocks[block];
        let g = |id| self.params.get(id).clone();
        BlockParams {
            wqkv: g(b.wqkv),
            bqkv: g(b.bqkv),
            wo: g(b.wo),
            bo: g(b.bo),
            w1: g(b.w1),
            b1: g(b.b1),
            w2: g(b.w2),
            b2: g(b.b2),
        }
    }

    /// Binds every parameter to a leaf on `tape`, indexed like the store.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(id, _, t)| tape.param(id, t)).collect()
    }

    /// Encodes each reference image `[ref_c, ref_h, ref_w]` with the 3x3 encoder.
    pub fn encode_graph(&self, tape: &mut Tape, p: &[Var], refs: &[Var]) -> Result<Vec<Var>> {
        let want = self.config.ref_shape();
        refs.iter()
            .map(|&r| {
                if tape.value(r).shape() != want {
                    return Err(shape_err(
                        "encode_reference",
                        format!("reference {:?}, model expects {want:?}", tape.value(r).shape()),
                    ));
                }
                tape.conv3x3(r, p[self.layout.enc_w.0], p[self.layout.enc_b.0])
            })
            .collect()
    }

    fn ref_tokens(&self, tape: &mut Tape, p: &[Var], feature: Var, slot: Option<usize>) -> Result<Var> {
        let c = &self.config;
        let want = [c.feat_dim, c.ref_height, c.ref_width];
        if tape.value(feature).shape() != want {
            return Err(shape_err(
                "denoise",
                format!("reference features {:?}, model expects {want:?}", tape.value(feature).shape()),
            ));
        }
        let flat = tape.reshape(feature, &[c.feat_dim, c.tokens_per_ref()])?;
        let tok = tape.transpose(flat)?;
        let e = tape.linear(tok, p[self.layout.ref_w.0], p[self.layout.ref_b.0])?;
        let mut e = tape.add(e, p[self.layout.ref_pos.0])?;
        let ty = tape.slice_rows(p[self.layout.type_emb.0], 1, 1)?;
        e = tape.add_row(e, ty)?;
        if let Some(k) = slot {
            let s = tape.input(Tensor::new([1, c.d_model], sinusoid(k as f64, c.d_model))?);
            e = tape.add_row(e, s)?;
        }
        Ok(e)
    }

    fn modulation_graph(&self, tape: &mut Tape, p: &[Var], e: Var, adapter: usize) -> Result<ModVars> {
        let d = self.config.d_model;
        let ids = &self.layout.adapters[adapter];
        let h = tape.linear(e, p[ids.w1.0], p[ids.b1.0])?;
        let h = tape.gelu(h);
        let o = tape.linear(h, p[ids.w2.0], p[ids.b2.0])?;
        let dg = tape.slice_cols(o, 0, d)?;
        Ok(ModVars {
            gamma: tape.add_const(dg, 1.0),
            beta: tape.slice_cols(o, d, d)?,
            eta: tape.slice_cols(o, 2 * d, d)?,
        })
    }

    /// Backbone forward on the tape. `embedding = None` runs the unconditioned
    /// backbone with the identity modulation `(1, 0, 0)` in every sublayer.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &Tensor,
        t: f64,
        refs: &RefFeatures,
        embedding: Option<&PromptEmbedding>,
    ) -> Result<Var> {
        let c = &self.config;
        let d = c.d_model;
        if x_t.shape() != c.latent_shape() {
            return Err(shape_err("denoise", format!("latent {:?}, model expects {:?}", x_t.shape(), c.latent_shape())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("denoise", format!("timestep {t} outside [0, 1]")));
        }
        let l = &self.layout;
        let tokens = tape.input(patchify(x_t)?);
        let v = tape.linear(tokens, p[l.video_w.0], p[l.video_b.0])?;
        let v = tape.add(v, p[l.pos.0])?;
        let ty = tape.slice_rows(p[l.type_emb.0], 0, 1)?;
        let v = tape.add_row(v, ty)?;
        let mut parts = vec![v];
        match refs {
            RefFeatures::Fused(f) => parts.push(self.ref_tokens(tape, p, *f, None)?),
            RefFeatures::Slots(slots) => {
                if slots.len() > c.max_refs {
                    return Err(invalid(
                        "denoise",
                        format!("{} references overflow the {} reference slots", slots.len(), c.max_refs),
                    ));
                }
                for (k, &f) in slots.iter().enumerate() {
                    parts.push(self.ref_tokens(tape, p, f, Some(k))?);
                }
            }
        }
        let seq = tape.concat_rows(&parts)?;
        let tf = tape.input(Tensor::new([1, d], timestep_features(t, d))?);
        let temb = tape.linear(tf, p[l.time_w.0], p[l.time_b.0])?;
        let mut x = tape.add_row(seq, temb)?;

        let mods: Vec<ModVars> = match embedding {
            Some(e) => {
                if e.dim() != c.emb_dim {
                    return Err(shape_err("sca_forward", format!("embedding width {} vs {}", e.dim(), c.emb_dim)));
                }
                let ev = tape.input(Tensor::new([1, e.dim()], e.vector.clone())?);
                (0..l.adapters.len()).map(|a| self.modulation_graph(tape, p, ev, a)).collect::<Result<_>>()?
            }
            None => {
                let id = ModulationParams::identity(d);
                let m = ModVars::inputs(tape, &id)?;
                vec![m; l.adapters.len()]
            }
        };
        for (i, ids) in l.blocks.iter().enumerate() {
            let bv = BlockVars {
                wqkv: p[ids.wqkv.0],
                bqkv: p[ids.bqkv.0],
                wo: p[ids.wo.0],
                bo: p[ids.bo.0],
                w1: p[ids.w1.0],
                b1: p[ids.b1.0],
                w2: p[ids.w2.0],
                b2: p[ids.b2.0],
            };
            let am = mods[self.adapter_index(i, Sublayer::Attention)];
            let fm = mods[self.adapter_index(i, Sublayer::FeedForward)];
            x = smo_block_graph(tape, x, &bv, c.n_heads, &am, &fm)?;
        }
        let x = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let x = tape.slice_rows(x, 0, c.video_tokens())?;
        let out = tape.linear(x, p[l.head_w.0], p[l.head_b.0])?;
        let out = tape.transpose(out)?;
        tape.reshape(out, &c.latent_shape())
    }

    /// Encodes reference images, conditions on them and predicts the velocity.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_graph(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &Tensor,
        t: f64,
        refs: &[Var],
        embedding: Option<&PromptEmbedding>,
        conditioner: &Conditioner,
    ) -> Result<PredictionGraph> {
        if refs.is_empty() {
            return Err(Error::Empty("denoise"));
        }
        let features = self.encode_graph(tape, p, refs)?;
        let rf = match conditioner {
            Conditioner::Fourier(settings) => {
                let order: Vec<usize> = (0..features.len()).collect();
                RefFeatures::Fused(fuse_graph(tape, &features, &order, settings, &NoHook)?)
            }
            Conditioner::Sequential => RefFeatures::Slots(features.clone()),
        };
        let output = self.forward_graph(tape, p, x_t, t, &rf, embedding)?;
        Ok(PredictionGraph { output, features })
    }

    /// Value-only [`Denoiser::predict_graph`] over preprocessed reference images.
    pub fn predict(
        &self,
        x_t: &Tensor,
        t: f64,
        refs: &[Tensor],
        embedding: Option<&PromptEmbedding>,
        conditioner: &Conditioner,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let r: Vec<Var> = refs.iter().map(|x| tape.input(x.clone())).collect();
        let g = self.predict_graph(&mut tape, &p, x_t, t, &r, embedding, conditioner)?;
        Ok(tape.value(g.output).clone())
    }

    /// Prediction from an already fused reference condition.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        t: f64,
        fused: &FusedCondition,
        embedding: Option<&PromptEmbedding>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = tape.input(fused.feature.clone());
        let out = self.forward_graph(&mut tape, &p, x_t, t, &RefFeatures::Fused(f), embedding)?;
        Ok(tape.value(out).clone())
    }
}
