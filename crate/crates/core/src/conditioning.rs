//! Reference images, the convolutional reference encoder, prompt embedding
//! providers and the scale control adapter.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::{gelu, resize_bilinear};
use crate::rng::mix64;
use crate::tensor::Tensor;

/// Pixel value used for background and padding after preprocessing.
pub const WHITE: f64 = 1.0;

/// A reference image with its binary subject mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage {
    pixels: Tensor,
    mask: Tensor,
    area_ratio: f64,
}

impl ReferenceImage {
    /// `pixels` is `c x H x W` in `[0, 1]`; `mask` is `H x W` with entries in `{0, 1}`.
    pub fn new(pixels: Tensor, mask: Tensor) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(shape_err("ReferenceImage", format!("pixels must be c x H x W, got {:?}", pixels.shape())));
        }
        let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
        if mask.shape() != [h, w] {
            return Err(shape_err("ReferenceImage", format!("mask {:?} vs image {h}x{w}", mask.shape())));
        }
        if let Some(i) = mask.data().iter().position(|&m| m != 0.0 && m != 1.0) {
            return Err(invalid("ReferenceImage", format!("mask entry {i} is {} (must be 0 or 1)", mask.data()[i])));
        }
        if let Some(i) = pixels.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("ReferenceImage", format!("pixel {i} is {} (must lie in [0, 1])", pixels.data()[i])));
        }
        let area_ratio = mask.mean();
        Ok(Self { pixels, mask, area_ratio })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Fraction of the image covered by the subject.
    pub fn area_ratio(&self) -> f64 {
        self.area_ratio
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Inclusive bounding box `(top, left, bottom, right)` of the mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let w = self.mask.shape()[1];
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m == 1.0 {
                let (r, c) = (i / w, i % w);
                bbox = Some(match bbox {
                    None => (r, c, r, c),
                    Some((t, l, b, rr)) => (t.min(r), l.min(c), b.max(r), rr.max(c)),
                });
            }
        }
        bbox
    }
}

/// Crops the subject's bounding box, whitens background pixels, and resizes
/// to fit `out_h x out_w` with the aspect ratio preserved and white padding
/// centred around the result.
pub fn preprocess_reference(reference: &ReferenceImage, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("preprocess_reference", format!("output extent {out_h}x{out_w}")));
    }
    let (top, left, bottom, right) = reference.bounding_box().ok_or(Error::NoSubject)?;
    let (bh, bw) = (bottom - top + 1, right - left + 1);
    let c = reference.channels();
    let w = reference.pixels.shape()[2];
    let (fit_h, fit_w) = fitted_extent(bh, bw, out_h, out_w);
    let (off_h, off_w) = ((out_h - fit_h) / 2, (out_w - fit_w) / 2);
    let mut out = Tensor::full([c, out_h, out_w], WHITE);
    for ch in 0..c {
        let mut crop = Tensor::zeros([bh, bw]);
        for r in 0..bh {
            for q in 0..bw {
                let (sr, sc) = (top + r, left + q);
                let v = if reference.mask.data()[sr * w + sc] == 1.0 {
                    reference.pixels.get(&[ch, sr, sc])
                } else {
                    WHITE
                };
                crop.data_mut()[r * bw + q] = v;
            }
        }
        let resized = resize_bilinear(&crop, fit_h, fit_w)?;
        for r in 0..fit_h {
            for q in 0..fit_w {
                out.set(&[ch, off_h + r, off_w + q], resized.data()[r * fit_w + q]);
            }
        }
    }
    Ok(out)
}

/// Largest `(h, w)` inside `out_h x out_w` with the aspect of `bh x bw`.
pub fn fitted_extent(bh: usize, bw: usize, out_h: usize, out_w: usize) -> (usize, usize) {
    let scale = (out_h as f64 / bh as f64).min(out_w as f64 / bw as f64);
    let fit = |n: usize, max: usize| (libm::round(n as f64 * scale) as usize).clamp(1, max);
    (fit(bh, out_h), fit(bw, out_w))
}

/// Same-padded 3x3 convolution, stride 1: `x` is `c_in x H x W`, `weight`
/// is `c_out x c_in x 3 x 3`, `bias` is `c_out`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(shape_err("conv3x3", format!("input must be c x H x W, got {:?}", x.shape())));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(shape_err("conv3x3", format!("kernel must be c_out x c_in x 3 x 3, got {ws:?}")));
    }
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = ws[0];
    if ws[1] != c_in {
        return Err(shape_err("conv3x3", format!("kernel expects {} input channels, image has {c_in}", ws[1])));
    }
    if bias.len() != c_out {
        return Err(shape_err("conv3x3", format!("bias has {} entries for {c_out} outputs", bias.len())));
    }
    let mut out = Tensor::zeros([c_out, h, w]);
    let (xd, wd) = (x.data(), weight.data());
    for o in 0..c_out {
        let b = bias.data()[o];
        for i in 0..h {
            for j in 0..w {
                let mut acc = b;
                for c in 0..c_in {
                    for di in 0..3 {
                        let Some(p) = (i + di).checked_sub(1).filter(|&p| p < h) else { continue };
                        for dj in 0..3 {
                            let Some(q) = (j + dj).checked_sub(1).filter(|&q| q < w) else { continue };
                            acc += wd[((o * c_in + c) * 3 + di) * 3 + dj] * xd[(c * h + p) * w + q];
                        }
                    }
                }
                out.data_mut()[(o * h + i) * w + j] = acc;
            }
        }
    }
    Ok(out)
}

/// Single 3x3 convolution mapping image channels to feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl EncoderParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("EncoderParams", format!("kernel must be d x c x 3 x 3, got {ws:?}")));
        }
        if bias.shape() != [ws[0]] {
            return Err(shape_err("EncoderParams", format!("bias {:?} for {} outputs", bias.shape(), ws[0])));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `F = E(x)`: `c x H x W` reference to `d x H x W` features.
pub fn encode_reference(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    conv3x3(x, &params.weight, &params.bias)
}

/// Prompt embedding together with the provider that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f64>,
    pub provider_id: String,
}

impl PromptEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Maps prompt text to a fixed-width vector.
pub trait PromptEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Lowercased whitespace tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic stand-in for a language-model prompt encoder: each token and
/// each pair of adjacent tokens is hashed (with a seed) into a vector with
/// entries in `[-1, 1)`, the vectors are summed, and the sum is L2-normalized.
/// Pairs keep word order visible, so "small red" and "red small" differ.
#[derive(Clone, Debug)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

pub const HASHING_PROVIDER_ID: &str = "hash-bigram";

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let mut state = mix64(fnv1a(token.as_bytes()) ^ mix64(self.seed));
        for v in out.iter_mut() {
            state = mix64(state);
            *v += (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        }
    }
}

impl PromptEncoder for HashingEncoder {
    fn id(&self) -> &str {
        HASHING_PROVIDER_ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Empty("embed_prompt"));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.token_vector(t, &mut v);
        }
        for w in tokens.windows(2) {
            let mut pair = String::with_capacity(w[0].len() + w[1].len() + 1);
            pair.push_str(&w[0]);
            pair.push(' ');
            pair.push_str(&w[1]);
            self.token_vector(&pair, &mut v);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if !(norm > 0.0) {
            return Err(invalid("embed_prompt", "prompt embedding has zero norm".to_string()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Prompt encoders keyed by identifier.
#[derive(Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Box<dyn PromptEncoder>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding only the hashing stub.
    pub fn with_default(dim: usize, seed: u64) -> Self {
        let mut r = Self::new();
        r.register(Box::new(HashingEncoder::new(dim, seed)));
        r
    }

    pub fn register(&mut self, provider: Box<dyn PromptEncoder>) {
        self.providers.insert(provider.id().to_string(), provider);
    }

    pub fn get(&self, id: &str) -> Result<&dyn PromptEncoder> {
        self.providers.get(id).map(|p| p.as_ref()).ok_or_else(|| Error::UnknownProvider(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }
}

pub fn embed_prompt(prompt: &str, registry: &ProviderRegistry, provider_id: &str) -> Result<PromptEmbedding> {
    let provider = registry.get(provider_id)?;
    let vector = provider.encode(prompt)?;
    Ok(PromptEmbedding { vector, provider_id: provider_id.to_string() })
}

/// Scale, shift and residual gate for one modulated sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eta: Tensor,
}

impl ModulationParams {
    /// `(1, 0, 0)`: the sublayer is skipped and normalization is left unscaled.
    pub fn identity(d: usize) -> Self {
        Self { gamma: Tensor::ones([d]), beta: Tensor::zeros([d]), eta: Tensor::zeros([d]) }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Two-layer MLP from a prompt embedding to `(delta_gamma, beta, eta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `d_emb x hidden`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `hidden x 3 d_model`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AdapterParams {
    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn model_width(&self) -> usize {
        self.w2.shape()[1] / 3
    }
}

/// Scale control adapter forward pass. `gamma` is returned as `1 + delta`,
/// so a zero final layer yields the identity modulation exactly.
pub fn sca_forward(e: &PromptEmbedding, adapter: &AdapterParams) -> Result<ModulationParams> {
    if e.dim() != adapter.input_width() {
        return Err(shape_err(
            "sca_forward",
            format!("embedding width {} vs adapter input {}", e.dim(), adapter.input_width()),
        ));
    }
    let x = Tensor::new([1, e.dim()], e.vector.clone())?;
    let mut h = x.matmul(&adapter.w1)?;
    for (v, b) in h.data_mut().iter_mut().zip(adapter.b1.data()) {
        *v = gelu(*v + b);
    }
    let mut out = h.matmul(&adapter.w2)?;
    for (v, b) in out.data_mut().iter_mut().zip(adapter.b2.data()) {
        *v += b;
    }
    let d = adapter.model_width();
    let o = out.data();
    Ok(ModulationParams {
        gamma: Tensor::vector(o[..d].iter().map(|v| v + 1.0).collect()),
        beta: Tensor::vector(o[d..2 * d].to_vec()),
        eta: Tensor::vector(o[2 * d..3 * d].to_vec()),
    })
}
