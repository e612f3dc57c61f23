//! Flow-matching targets, the mask-weighted scale loss, the permutation
//! loss over fused references, and their combination.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::conditioning::ReferenceImage;
use crate::error::{invalid, shape_err, Error, Result};
use crate::fusion::{fuse, radial_mask, BandWeights, Summation};
use crate::ops::{resize_bilinear, softmax};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Stabilizer in the scale-loss denominator. It only has to keep an all-zero
/// map from dividing by zero; at 1e-12 its bias on a uniform map stays below
/// 1e-12 relative to the loss for any latent of at least one element.
pub const SCALE_EPS: f64 = 1e-12;

/// Linear path `x_t = (1 - t) x0 + t noise` and its velocity `noise - x0`.
pub fn flow_match_target(x0: &Tensor, noise: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid("flow_match_target", format!("t = {t} must lie in (0, 1)")));
    }
    x0.ensure_same_shape(noise, "flow_match_target")?;
    let x_t = x0.zip_map(noise, |a, n| (1.0 - t) * a + t * n)?;
    let target = noise.sub(x0)?;
    Ok((x_t, target))
}

/// Subject masks of a scene's references with their area ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<Tensor>,
    area_ratios: Vec<f64>,
}

impl MaskSet {
    pub fn new(masks: Vec<Tensor>, area_ratios: Vec<f64>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Empty("MaskSet"));
        }
        if masks.len() != area_ratios.len() {
            return Err(shape_err("MaskSet", format!("{} masks, {} area ratios", masks.len(), area_ratios.len())));
        }
        for (i, m) in masks.iter().enumerate() {
            m.dims2("MaskSet")?;
            if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("MaskSet", format!("mask {i} has values outside [0, 1]")));
            }
        }
        // Ratios measured from references lie in (0, 1]; the softmax only
        // needs them finite.
        if let Some(a) = area_ratios.iter().find(|a| !a.is_finite()) {
            return Err(invalid("MaskSet", format!("area ratio {a} is not finite")));
        }
        Ok(Self { masks, area_ratios })
    }

    pub fn from_references(refs: &[ReferenceImage]) -> Result<Self> {
        Self::new(refs.iter().map(|r| r.mask().clone()).collect(), refs.iter().map(|r| r.area_ratio()).collect())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn area_ratios(&self) -> &[f64] {
        &self.area_ratios
    }

    /// `softmax(a)`.
    pub fn weights(&self) -> Result<Vec<f64>> {
        softmax(&self.area_ratios)
    }
}

/// Non-negative `H x W` weight map on the latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeightMap {
    map: Tensor,
}

impl SpatialWeightMap {
    pub fn new(map: Tensor) -> Result<Self> {
        map.dims2("SpatialWeightMap")?;
        if let Some(v) = map.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid("SpatialWeightMap", format!("weight {v} must be finite and non-negative")));
        }
        Ok(Self { map })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self { map: Tensor::ones([h, w]) }
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    /// Weights broadcast over the leading axes of `shape`.
    fn broadcast(&self, shape: &[usize], op: &'static str) -> Result<Vec<f64>> {
        let n = shape.len();
        if n < 2 || shape[n - 2..] != *self.map.shape() {
            return Err(shape_err(op, format!("weight map {:?} against {shape:?}", self.map.shape())));
        }
        let planes: usize = shape[..n - 2].iter().product();
        let mut out = Vec::with_capacity(planes * self.map.len());
        for _ in 0..planes {
            out.extend_from_slice(self.map.data());
        }
        Ok(out)
    }
}

/// `M = sum_r softmax(a)_r * resize(m_r)`.
pub fn spatial_weight_map(masks: &MaskSet, lat_h: usize, lat_w: usize) -> Result<SpatialWeightMap> {
    let w = masks.weights()?;
    let mut map = Tensor::zeros([lat_h, lat_w]);
    for (m, wr) in masks.masks.iter().zip(w) {
        let r = resize_bilinear(m, lat_h, lat_w)?;
        for (o, v) in map.data_mut().iter_mut().zip(r.data()) {
            *o += wr * v;
        }
    }
    SpatialWeightMap::new(map)
}

/// Per-element weights `M / (sum M + eps)` for a batch, where each error map
/// is paired with its own weight map and the denominator spans the batch.
pub fn scale_loss_weights(shapes: &[&[usize]], maps: &[&SpatialWeightMap], eps: f64) -> Result<Vec<Vec<f64>>> {
    if shapes.len() != maps.len() || shapes.is_empty() {
        return Err(shape_err("scale_loss", format!("{} error maps, {} weight maps", shapes.len(), maps.len())));
    }
    let mut all = Vec::with_capacity(shapes.len());
    for (s, m) in shapes.iter().zip(maps) {
        all.push(m.broadcast(s, "scale_loss")?);
    }
    let denom = all.iter().flatten().sum::<f64>() + eps;
    for w in all.iter_mut() {
        w.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(all)
}

/// `sum(err * M) / (sum M + eps)` with `M` broadcast over the leading axes.
pub fn scale_loss(err_map: &Tensor, m: &SpatialWeightMap, eps: f64) -> Result<f64> {
    scale_loss_batch(&[err_map], &[m], eps)
}

/// Batched scale loss: numerator and denominator both sum over the batch.
pub fn scale_loss_batch(err_maps: &[&Tensor], maps: &[&SpatialWeightMap], eps: f64) -> Result<f64> {
    let shapes: Vec<&[usize]> = err_maps.iter().map(|e| e.shape()).collect();
    let weights = scale_loss_weights(&shapes, maps, eps)?;
    Ok(err_maps
        .iter()
        .zip(&weights)
        .map(|(e, w)| e.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Scale loss on a tape: `preds[b]` regressed onto `targets[b]`.
pub fn scale_loss_graph(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Tensor],
    maps: &[&SpatialWeightMap],
    eps: f64,
) -> Result<Var> {
    if preds.len() != targets.len() {
        return Err(shape_err("scale_loss", format!("{} predictions, {} targets", preds.len(), targets.len())));
    }
    let shapes: Vec<&[usize]> = targets.iter().map(|t| t.shape()).collect();
    let weights = scale_loss_weights(&shapes, maps, eps)?;
    let mut total: Option<Var> = None;
    for ((&p, t), w) in preds.iter().zip(targets).zip(weights) {
        let target = tape.input(t.clone());
        let diff = tape.sub(p, target)?;
        let sq = tape.square(diff);
        let term = tape.weighted_sum(sq, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or(Error::Empty("scale_loss"))
}

/// `min(3, N! - 1)`.
pub fn default_permutation_count(n: usize) -> usize {
    let mut f: usize = 1;
    for k in 2..=n {
        f = f.saturating_mul(k);
        if f > 3 {
            return 3;
        }
    }
    f - 1
}

fn factorial_saturating(n: usize) -> usize {
    (2..=n).try_fold(1usize, |f, k| f.checked_mul(k)).unwrap_or(usize::MAX)
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else { return out };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap_or(i);
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
}

const ENUMERATE_LIMIT: usize = 8;

/// Up to `p` distinct non-identity permutations of `0..n`, uniform without
/// replacement. Returns fewer when fewer exist.
pub fn draw_permutations(n: usize, p: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if p < 1 {
        return Err(invalid("permutation_loss", "permutation count must be >= 1".into()));
    }
    let available = factorial_saturating(n).saturating_sub(1);
    let k = p.min(available);
    if n <= ENUMERATE_LIMIT {
        let perms: Vec<Vec<usize>> = all_permutations(n).into_iter().skip(1).collect();
        return Ok(rng.choose_distinct(perms.len(), k).into_iter().map(|i| perms[i].clone()).collect());
    }
    let identity: Vec<usize> = (0..n).collect();
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut cand = identity.clone();
        rng.shuffle(&mut cand);
        if cand != identity && !out.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Scale and offset applied to the feature map at one slot of one ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPerturbation {
    pub scale: f64,
    pub offset: Option<Tensor>,
}

impl SlotPerturbation {
    pub const NONE: SlotPerturbation = SlotPerturbation { scale: 1.0, offset: None };
}

/// Test hook that makes fusion order-dependent on purpose.
pub trait PermutationHook {
    fn perturb(&self, order: &[usize], slot: usize) -> SlotPerturbation;
}

/// The faithful pipeline: no perturbation.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHook;

impl PermutationHook for NoHook {
    fn perturb(&self, _: &[usize], _: usize) -> SlotPerturbation {
        SlotPerturbation::NONE
    }
}

/// Fusion settings shared by the permutation loss and the denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionSettings {
    pub cutoff_ratio: f64,
    pub band_weights: BandWeights,
    pub summation: Summation,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            cutoff_ratio: crate::fusion::DEFAULT_CUTOFF,
            band_weights: BandWeights::default(),
            summation: Summation::Canonical,
        }
    }
}

/// Fuses `features` taken in `order` on the tape, applying `hook` per slot.
pub fn fuse_graph(
    tape: &mut Tape,
    features: &[Var],
    order: &[usize],
    settings: &FusionSettings,
    hook: &dyn PermutationHook,
) -> Result<Var> {
    let mut inputs = Vec::with_capacity(order.len());
    for (slot, &i) in order.iter().enumerate() {
        let SlotPerturbation { scale, offset } = hook.perturb(order, slot);
        let mut v = features[i];
        if scale != 1.0 {
            v = tape.scale(v, scale);
        }
        if let Some(off) = offset {
            let o = tape.input(off);
            v = tape.add(v, o)?;
        }
        inputs.push(v);
    }
    let values: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let fused = fuse(&values, settings.cutoff_ratio, settings.band_weights, settings.summation)?;
    let shape = tape.value(inputs[0]).shape().to_vec();
    let mask = radial_mask(shape[1], shape[2], settings.cutoff_ratio)?;
    Ok(tape.fused(&inputs, fused.feature, mask, settings.band_weights))
}

/// `(1/P) sum_p ||F(R_p) - F(R_ref)||^2` on the tape over explicit orders,
/// with the as-given order as reference. The norm is the spatial sum of
/// squares, which equals the normalized spectral norm.
pub fn permutation_loss_graph(
    tape: &mut Tape,
    features: &[Var],
    orders: &[Vec<usize>],
    settings: &FusionSettings,
    hook: &dyn PermutationHook,
) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Empty("permutation_loss"));
    }
    if orders.is_empty() {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    let identity: Vec<usize> = (0..features.len()).collect();
    let reference = fuse_graph(tape, features, &identity, settings, hook)?;
    let mut total: Option<Var> = None;
    for order in orders {
        if order.len() != features.len() {
            return Err(shape_err("permutation_loss", format!("order {order:?} for {} references", features.len())));
        }
        let f = fuse_graph(tape, features, order, settings, hook)?;
        let d = tape.sub(f, reference)?;
        let s = tape.sum_squares(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let sum = total.ok_or(Error::Empty("permutation_loss"))?;
    Ok(tape.scale(sum, 1.0 / orders.len() as f64))
}

/// Value-only permutation loss over `p` sampled orders.
pub fn permutation_loss(
    features: &[&Tensor],
    p: usize,
    settings: &FusionSettings,
    rng: &mut SeededRng,
    hook: &dyn PermutationHook,
) -> Result<f64> {
    let orders = draw_permutations(features.len(), p, rng)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.input((*f).clone())).collect();
    let loss = permutation_loss_graph(&mut tape, &vars, &orders, settings, hook)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct LossWeights {
    pub scale: f64,
    pub perm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { scale: 1.0, perm: 1.0 }
    }
}

pub fn spsl_total(l_scale: f64, l_perm: f64, weights: LossWeights) -> f64 {
    weights.scale * l_scale + weights.perm * l_perm
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_scale: f64,
    pub l_perm: f64,
    pub l_spsl: f64,
    pub l_mse_mean: f64,
}
