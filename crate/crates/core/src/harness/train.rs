//! Training: batches of scenes, the SPSL objective on the tape, AdamW.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{embed_prompt, PromptEmbedding, ProviderRegistry};
use crate::dit::{Conditioner, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    default_permutation_count, draw_permutations, flow_match_target, permutation_loss_graph, scale_loss_graph,
    spatial_weight_map, spsl_total, FusionSettings, LossReport, LossWeights, MaskSet, NoHook, PermutationHook,
    SpatialWeightMap, SCALE_EPS,
};
use crate::optim::{adamw_step, AdamWConfig, CosineRestarts, Moments};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::scene::SyntheticScene;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Cosine restart period `S`.
    pub restart_period: u64,
    pub adam: AdamWConfig,
    pub loss_weights: LossWeights,
    /// Permutations per sample; `None` uses `min(3, N! - 1)`.
    pub perm_count: Option<usize>,
    pub cutoff_ratio: f64,
    pub band_high: f64,
    pub band_low: f64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            base_lr: 1e-3,
            restart_period: 200,
            adam: AdamWConfig::default(),
            loss_weights: LossWeights::default(),
            perm_count: None,
            cutoff_ratio: crate::fusion::DEFAULT_CUTOFF,
            band_high: 1.0,
            band_low: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn fusion(&self) -> FusionSettings {
        FusionSettings {
            cutoff_ratio: self.cutoff_ratio,
            band_weights: crate::fusion::BandWeights { high: self.band_high, low: self.band_low },
            summation: crate::fusion::Summation::Canonical,
        }
    }

    pub fn schedule(&self) -> Result<CosineRestarts> {
        CosineRestarts::new(self.base_lr, self.restart_period)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("TrainConfig", "batch_size must be >= 1".into()));
        }
        if self.perm_count == Some(0) {
            return Err(invalid("TrainConfig", "perm_count must be >= 1".into()));
        }
        if !(self.cutoff_ratio > 0.0 && self.cutoff_ratio < 1.0) {
            return Err(invalid("TrainConfig", format!("cutoff_ratio {} outside (0, 1)", self.cutoff_ratio)));
        }
        self.schedule().map(|_| ())
    }
}

/// A scene reduced to what the objective needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor,
    pub references: Vec<Tensor>,
    pub embedding: PromptEmbedding,
    pub weight_map: SpatialWeightMap,
}

impl TrainExample {
    pub fn from_scene(scene: &SyntheticScene, registry: &ProviderRegistry, provider: &str) -> Result<Self> {
        let masks = frame_masks(scene)?;
        let shape = scene.video.shape();
        let weight_map = spatial_weight_map(&masks, shape[2], shape[3])?;
        Ok(Self {
            x0: scene.video.clone(),
            references: scene.references.clone(),
            embedding: embed_prompt(&scene.prompt, registry, provider)?,
            weight_map,
        })
    }
}

/// Subject masks in frame 0 with their area ratios in the frame: the masks
/// a segmenter would return on the source frame the references come from.
pub fn frame_masks(scene: &SyntheticScene) -> Result<MaskSet> {
    let mut masks = Vec::with_capacity(scene.masks.len());
    for m in &scene.masks {
        let s = m.shape();
        let first = Tensor::new([s[1], s[2]], m.data()[..s[1] * s[2]].to_vec())?;
        masks.push(first);
    }
    let ratios = masks.iter().map(|m| m.mean()).collect();
    MaskSet::new(masks, ratios)
}

/// Random quantities drawn for one sample of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub t: f64,
    pub noise: Tensor,
    pub orders: Vec<Vec<usize>>,
}

impl SampleDraw {
    pub fn draw(rng: &mut SeededRng, example: &TrainExample, perm_count: Option<usize>) -> Result<Self> {
        let t = rng.open01();
        let noise = rng.normal_tensor(example.x0.shape());
        let n = example.references.len();
        let p = perm_count.unwrap_or_else(|| default_permutation_count(n));
        let orders = if p == 0 { Vec::new() } else { draw_permutations(n, p, rng)? };
        Ok(Self { t, noise, orders })
    }
}

/// Everything that determines the next step: parameters, moments, step,
/// schedule base and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Denoiser,
    pub moments: Moments,
    pub step: u64,
    pub base_lr: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Denoiser, base_lr: f64, seed: u64) -> Self {
        let moments = Moments::zeros_like(model.params());
        Self { model, moments, step: 0, base_lr, seed }
    }
}

/// Batch indices and per-sample draws of step `step`.
pub fn step_draws(
    seed: u64,
    step: u64,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, Vec<SampleDraw>)> {
    if examples.is_empty() {
        return Err(Error::Empty("train_step"));
    }
    let mut rng = SeededRng::derive(seed, "step", step);
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(examples.len())).collect();
    let draws = idx
        .iter()
        .map(|&i| SampleDraw::draw(&mut rng, &examples[i], cfg.perm_count))
        .collect::<Result<Vec<_>>>()?;
    Ok((idx, draws))
}

/// Builds the SPSL objective for a batch on `tape` and returns its node.
#[allow(clippy::too_many_arguments)]
pub fn spsl_graph(
    tape: &mut Tape,
    params: &[Var],
    model: &Denoiser,
    batch: &[&TrainExample],
    draws: &[SampleDraw],
    fusion: &FusionSettings,
    weights: LossWeights,
    hook: &dyn PermutationHook,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(invalid("spsl", format!("{} examples, {} draws", batch.len(), draws.len())));
    }
    let conditioner = Conditioner::Fourier(*fusion);
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut perm_terms = Vec::with_capacity(batch.len());
    for (ex, d) in batch.iter().zip(draws) {
        let (x_t, target) = flow_match_target(&ex.x0, &d.noise, d.t)?;
        let refs: Vec<Var> = ex.references.iter().map(|r| tape.input(r.clone())).collect();
        let g = model.predict_graph(tape, params, &x_t, d.t, &refs, Some(&ex.embedding), &conditioner)?;
        perm_terms.push(permutation_loss_graph(tape, &g.features, &d.orders, fusion, hook)?);
        preds.push(g.output);
        targets.push(target);
    }
    let maps: Vec<&SpatialWeightMap> = batch.iter().map(|e| &e.weight_map).collect();
    let l_scale = scale_loss_graph(tape, &preds, &targets, &maps, SCALE_EPS)?;
    let mut perm_sum = perm_terms[0];
    for &p in &perm_terms[1..] {
        perm_sum = tape.add(perm_sum, p)?;
    }
    let l_perm = tape.scale(perm_sum, 1.0 / batch.len() as f64);
    let ws = tape.scale(l_scale, weights.scale);
    let wp = tape.scale(l_perm, weights.perm);
    let total = tape.add(ws, wp)?;

    let (mut sq, mut count) = (0.0, 0usize);
    for (p, t) in preds.iter().zip(&targets) {
        sq += tape.value(*p).zip_map(t, |a, b| (a - b) * (a - b))?.sum();
        count += t.len();
    }
    let (ls, lp) = (tape.value(l_scale).data()[0], tape.value(l_perm).data()[0]);
    let report = LossReport { l_scale: ls, l_perm: lp, l_spsl: spsl_total(ls, lp, weights), l_mse_mean: sq / count as f64 };
    Ok((total, report))
}

/// Loss and flat gradient of the SPSL objective at the model's parameters.
pub fn spsl_value_and_grad(
    model: &Denoiser,
    batch: &[&TrainExample],
    draws: &[SampleDraw],
    fusion: &FusionSettings,
    weights: LossWeights,
    hook: &dyn PermutationHook,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let (loss, report) = spsl_graph(&mut tape, &p, model, batch, draws, fusion, weights, hook)?;
    let grads = tape.backward(loss)?;
    Ok((report, tape.param_grads(&grads, model.params())))
}

/// One optimizer step. On a non-finite loss or gradient the input state is
/// left untouched and an error is returned.
pub fn train_step(state: &TrainState, examples: &[TrainExample], cfg: &TrainConfig) -> Result<(TrainState, LossReport)> {
    let (idx, draws) = step_draws(state.seed, state.step, examples, cfg)?;
    let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
    let (report, grads) =
        spsl_value_and_grad(&state.model, &batch, &draws, &cfg.fusion(), cfg.loss_weights, &NoHook)?;
    if !report.l_spsl.is_finite() {
        return Err(Error::NonFinite { op: "train_step", index: state.step as usize });
    }
    for g in &grads {
        g.ensure_finite("train_step")?;
    }
    let lr = CosineRestarts::new(state.base_lr, cfg.restart_period)?.lr(state.step);
    let mut next = state.clone();
    adamw_step(&cfg.adam, next.model.params_mut(), &grads, &mut next.moments, state.step + 1, lr)?;
    next.step += 1;
    Ok((next, report))
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn train_until(
    mut state: TrainState,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &CurvePoint) -> Result<()>,
) -> Result<TrainState> {
    let schedule = CosineRestarts::new(state.base_lr, cfg.restart_period)?;
    while state.step < until {
        let lr = schedule.lr(state.step);
        let step = state.step;
        let (next, loss) = train_step(&state, examples, cfg)?;
        state = next;
        on_step(&state, &CurvePoint { step, lr, loss })?;
    }
    Ok(state)
}

/// Trailing moving average of `values` ending at index `end` (inclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let start = (end + 1).saturating_sub(window);
    let w = &values[start..=end];
    w.iter().sum::<f64>() / w.len() as f64
}
