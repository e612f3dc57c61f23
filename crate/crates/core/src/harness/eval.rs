//! Evaluation protocols: permutation sensitivity, geometric scale
//! consistency, SubjectSim and the SPSL gradient check.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dit::{Conditioner, DiTConfig, Denoiser, Init};
use crate::error::{invalid, Result};
use crate::gradcheck::{grad_check, GradReport};
use crate::losses::{all_permutations, draw_permutations, LossWeights, PermutationHook, SlotPerturbation};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::sample::{sample_references, ReferenceField};
use super::scene::{subject_latent, SyntheticScene, BACKGROUND_LATENT, PALETTE};
use super::train::{spsl_value_and_grad, SampleDraw, TrainConfig, TrainExample};

/// Euler steps used when an evaluation generates videos.
pub const EVAL_SAMPLE_STEPS: usize = 8;
/// Below this magnitude gradient coordinates are compared absolutely: the
/// central difference at `h = 1e-5` carries roughly `1e-10` of rounding
/// noise, and some coordinates (the key bias under softmax) are exactly zero.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
/// Step of the central difference.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Frames SubjectSim looks at.
pub const SUBJECT_SIM_FRAMES: usize = 10;

/// Largest max-abs divergence between generations of `example` under
/// reordered references, all from the same noise.
pub fn eval_perm_sensitivity(
    model: &Denoiser,
    example: &TrainExample,
    conditioner: &Conditioner,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let n = example.references.len();
    if n < 2 {
        return Err(invalid("eval_perm_sensitivity", format!("needs >= 2 references, got {n}")));
    }
    let orders = if n <= 4 {
        all_permutations(n)
    } else {
        draw_permutations(n, 10, &mut SeededRng::derive(seed, "perm-eval", 0))?
    };
    let mut outputs = Vec::with_capacity(orders.len());
    for order in &orders {
        let refs: Vec<Tensor> = order.iter().map(|&i| example.references[i].clone()).collect();
        let field = ReferenceField { model, references: &refs, embedding: Some(&example.embedding), conditioner: *conditioner };
        outputs.push(sample_references(&field, steps, seed, 0)?);
    }
    let mut worst: f64 = 0.0;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            worst = worst.max(outputs[i].max_abs_diff(&outputs[j]));
        }
    }
    Ok(worst)
}

/// Nearest-color labels of a `[4, T, H, W]` latent: 0 is background, `k + 1`
/// is subject `k` of `colors`.
pub fn segment(video: &Tensor, colors: &[[f64; 3]]) -> Result<Vec<usize>> {
    let s = video.shape();
    if s.len() != 4 || s[0] != 4 {
        return Err(invalid("segment", format!("expected a [4, T, H, W] latent, got {s:?}")));
    }
    let plane = s[1] * s[2] * s[3];
    let mut protos = vec![BACKGROUND_LATENT];
    protos.extend(colors.iter().map(|c| subject_latent(*c)));
    let d = video.data();
    Ok((0..plane)
        .map(|i| {
            let dist = |p: &[f64; 4]| (0..4).map(|c| (d[c * plane + i] - p[c]).powi(2)).sum::<f64>();
            let mut best = 0;
            for (k, p) in protos.iter().enumerate().skip(1) {
                if dist(p) < dist(&protos[best]) {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Per-subject pixel areas per frame, `[subject][frame]`.
pub fn subject_areas(labels: &[usize], n_subjects: usize, frames: usize) -> Vec<Vec<usize>> {
    let per = labels.len() / frames.max(1);
    let mut areas = vec![vec![0usize; frames]; n_subjects];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            areas[l - 1][i / per] += 1;
        }
    }
    areas
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneScale {
    pub scene: u64,
    /// Mean over pairs of `|measured - prescribed|` side ratios.
    pub deviation: f64,
    /// Some subject was missing in more than half of the frames.
    pub failed: bool,
}

/// Scale deviation of a generated video against the scene's prescribed
/// side ratios. Side ratios are measured as `sqrt` of pixel-area ratios in
/// frames where both subjects are visible; a pair never visible together
/// counts as measured ratio 0.
pub fn scale_deviation(video: &Tensor, scene: &SyntheticScene) -> Result<SceneScale> {
    let n = scene.subjects.len();
    let frames = video.shape().get(1).copied().unwrap_or(0);
    let colors: Vec<[f64; 3]> = scene.subjects.iter().map(|s| s.color).collect();
    let areas = subject_areas(&segment(video, &colors)?, n, frames);
    let failed = areas.iter().any(|a| 2 * a.iter().filter(|&&x| x == 0).count() > frames);
    let pairs = scene.prescribed_ratios();
    if pairs.is_empty() {
        return Err(invalid("scale_deviation", format!("scene {} has a single subject", scene.id)));
    }
    let mut total = 0.0;
    for &(i, j, want) in &pairs {
        let (mut sum, mut k) = (0.0, 0usize);
        for t in 0..frames {
            if areas[i][t] > 0 && areas[j][t] > 0 {
                let measured = libm::sqrt(areas[i][t] as f64 / areas[j][t] as f64);
                sum += (measured - want).abs();
                k += 1;
            }
        }
        total += if k == 0 { want } else { sum / k as f64 };
    }
    Ok(SceneScale { scene: scene.id, deviation: total / pairs.len() as f64, failed })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScaleReport {
    /// Mean deviation over scored scenes, failed ones included.
    pub mean_deviation: f64,
    pub scenes: Vec<SceneScale>,
    pub failed: usize,
}

/// Generates every multi-subject scene and scores its scale consistency.
pub fn eval_scale_consistency(
    model: &Denoiser,
    scenes: &[SyntheticScene],
    examples: &[TrainExample],
    steps: usize,
    seed: u64,
) -> Result<ScaleReport> {
    if scenes.len() != examples.len() {
        return Err(invalid("eval_scale_consistency", format!("{} scenes, {} examples", scenes.len(), examples.len())));
    }
    let mut out = Vec::new();
    for (scene, ex) in scenes.iter().zip(examples) {
        if scene.subjects.len() < 2 {
            continue;
        }
        let field = ReferenceField {
            model,
            references: &ex.references,
            embedding: Some(&ex.embedding),
            conditioner: Conditioner::Fourier(TrainConfig::default().fusion()),
        };
        let video = sample_references(&field, steps, seed, scene.id)?;
        out.push(scale_deviation(&video, scene)?);
    }
    if out.is_empty() {
        return Err(invalid("eval_scale_consistency", "no scene has two or more subjects".into()));
    }
    let mean_deviation = out.iter().map(|s| s.deviation).sum::<f64>() / out.len() as f64;
    let failed = out.iter().filter(|s| s.failed).count();
    Ok(ScaleReport { mean_deviation, scenes: out, failed })
}

/// Embeds an image region given as a list of color vectors.
pub trait RegionEmbedder {
    fn embed(&self, pixels: &[[f64; 3]]) -> Vec<f64>;
}

/// Mean color in centered coordinates, `2c - 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanColor;

impl RegionEmbedder for MeanColor {
    fn embed(&self, pixels: &[[f64; 3]]) -> Vec<f64> {
        let n = pixels.len().max(1) as f64;
        (0..3).map(|c| pixels.iter().map(|p| 2.0 * p[c] - 1.0).sum::<f64>() / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && a.iter().any(|&x| x != 0.0) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectSimReport {
    pub score: f64,
    /// Frames without candidate regions.
    pub empty_frames: Vec<usize>,
}

/// `mean_i mean_t max_j cos(f(b_tj), f(S_i))` over candidate embeddings
/// `frames[t][j]` and reference embeddings `refs[i]`. A frame without
/// candidates contributes 0.
pub fn subject_sim(frames: &[Vec<Vec<f64>>], refs: &[Vec<f64>]) -> Result<SubjectSimReport> {
    if refs.is_empty() || frames.is_empty() {
        return Err(invalid("subject_sim", format!("{} frames, {} reference subjects", frames.len(), refs.len())));
    }
    let empty_frames: Vec<usize> = (0..frames.len()).filter(|&t| frames[t].is_empty()).collect();
    let mut total = 0.0;
    for r in refs {
        let mut per = 0.0;
        for cands in frames {
            // argmax of the cosine is the max cosine itself
            per += cands.iter().map(|c| cosine(c, r)).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))).unwrap_or(0.0);
        }
        total += per / frames.len() as f64;
    }
    Ok(SubjectSimReport { score: total / refs.len() as f64, empty_frames })
}

/// `min(n, T)` frame indices spread evenly over `0..T`.
pub fn sample_frames(t: usize, n: usize) -> Vec<usize> {
    let k = n.min(t);
    (0..k).map(|i| i * t / k).collect()
}

/// 4-connected components of occupied pixels (occupancy channel > 0) that
/// share a nearest palette color, in frame `t`, each returned as its decoded
/// RGB pixels.
pub fn candidate_regions(video: &Tensor, t: usize) -> Vec<Vec<[f64; 3]>> {
    let s = video.shape();
    let (frames, h, w) = (s[1], s[2], s[3]);
    let plane = frames * h * w;
    let base = t * h * w;
    let d = video.data();
    let occupied = |i: usize| d[3 * plane + base + i] > 0.0;
    let label = |i: usize| {
        let dist = |rgb: &[f64; 3]| (0..3).map(|c| (d[c * plane + base + i] - (2.0 * rgb[c] - 1.0)).powi(2)).sum::<f64>();
        let mut best = 0;
        for k in 1..PALETTE.len() {
            if dist(&PALETTE[k].1) < dist(&PALETTE[best].1) {
                best = k;
            }
        }
        best
    };
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if seen[start] || !occupied(start) {
            continue;
        }
        seen[start] = true;
        let color = label(start);
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let rgb = [0, 1, 2].map(|c| ((d[c * plane + base + i] + 1.0) / 2.0).clamp(0.0, 1.0));
            pixels.push(rgb);
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if !seen[j] && occupied(j) && label(j) == color {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        regions.push(pixels);
    }
    regions
}

/// SubjectSim of a generated latent video against the scene's reference
/// subjects (masked reference pixels).
pub fn subject_sim_video(video: &Tensor, scene: &SyntheticScene, embedder: &dyn RegionEmbedder) -> Result<SubjectSimReport> {
    let frames = video.shape().get(1).copied().unwrap_or(0);
    let cand: Vec<Vec<Vec<f64>>> = sample_frames(frames, SUBJECT_SIM_FRAMES)
        .into_iter()
        .map(|t| candidate_regions(video, t).iter().map(|r| embedder.embed(r)).collect())
        .collect();
    let refs: Vec<Vec<f64>> = scene
        .subjects
        .iter()
        .map(|s| {
            let (m, px) = (s.reference.mask(), s.reference.pixels());
            let hw = m.len();
            let pixels: Vec<[f64; 3]> = (0..hw)
                .filter(|&i| m.data()[i] > 0.5)
                .map(|i| [0, 1, 2].map(|c| px.data()[c * hw + i]))
                .collect();
            embedder.embed(&pixels)
        })
        .collect();
    subject_sim(&cand, &refs)
}

/// Generates each scene and averages SubjectSim.
pub fn eval_subject_sim(
    model: &Denoiser,
    scenes: &[SyntheticScene],
    examples: &[TrainExample],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if scenes.is_empty() || scenes.len() != examples.len() {
        return Err(invalid("eval_subject_sim", format!("{} scenes, {} examples", scenes.len(), examples.len())));
    }
    let mut total = 0.0;
    for (scene, ex) in scenes.iter().zip(examples) {
        let field = ReferenceField {
            model,
            references: &ex.references,
            embedding: Some(&ex.embedding),
            conditioner: Conditioner::Fourier(TrainConfig::default().fusion()),
        };
        let video = sample_references(&field, steps, seed, scene.id)?;
        total += subject_sim_video(&video, scene, &MeanColor)?.score;
    }
    Ok(total / scenes.len() as f64)
}

/// Scales slot `k` of every non-identity order by `1 + k / 10`, making the
/// permutation loss non-zero and parameter dependent.
#[derive(Clone, Copy, Debug, Default)]
pub struct OrderScaling;

impl PermutationHook for OrderScaling {
    fn perturb(&self, order: &[usize], slot: usize) -> SlotPerturbation {
        let identity = order.iter().enumerate().all(|(i, &o)| i == o);
        if identity {
            SlotPerturbation::NONE
        } else {
            SlotPerturbation { scale: 1.0 + slot as f64 / 10.0, offset: None }
        }
    }
}

/// Finite-difference check of the full SPSL gradient on a one-block model
/// with random weights, over every parameter.
pub fn gradcheck_spsl(seed: u64, h: f64) -> Result<GradReport> {
    let cfg = DiTConfig::gradcheck();
    let model = Denoiser::new(cfg.clone(), seed, Init::Random)?;
    let mut rng = SeededRng::derive(seed, "gradcheck", 0);
    let [c, t, hh, ww] = cfg.latent_shape();
    let n_refs = 3;
    let mut masks = Vec::new();
    for r in 0..n_refs {
        let mut m = Tensor::zeros([4, 4]);
        for i in 0..4 {
            for j in 0..=r {
                m.set(&[i, j], 1.0);
            }
        }
        masks.push(m);
    }
    let ratios: Vec<f64> = masks.iter().map(|m| m.mean()).collect();
    let weight_map = crate::losses::spatial_weight_map(&crate::losses::MaskSet::new(masks, ratios)?, hh, ww)?;
    let example = TrainExample {
        x0: rng.normal_tensor(&[c, t, hh, ww]),
        references: (0..n_refs).map(|_| rng.uniform_tensor(&cfg.ref_shape(), 0.0, 1.0)).collect(),
        embedding: crate::conditioning::PromptEmbedding {
            vector: rng.normal_tensor(&[cfg.emb_dim]).into_data(),
            provider_id: "gradcheck".into(),
        },
        weight_map,
    };
    let draw = SampleDraw {
        t: 0.37,
        noise: rng.normal_tensor(&[c, t, hh, ww]),
        orders: vec![vec![1, 0, 2], vec![2, 1, 0]],
    };
    let fusion = TrainConfig::default().fusion();
    let weights = LossWeights::default();
    let batch = [&example];
    let draws = [draw];
    let eval = |m: &Denoiser| spsl_value_and_grad(m, &batch, &draws, &fusion, weights, &OrderScaling);
    let value = |flat: &[f64]| {
        let mut m = model.clone();
        match m.params_mut().assign_flat(flat) {
            Ok(()) => eval(&m).map(|(r, _)| r.l_spsl).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };
    let gradient = |_: &[f64]| match eval(&model) {
        Ok((_, g)) => g.iter().flat_map(|t| t.data().iter().copied()).collect(),
        Err(_) => Vec::new(),
    };
    grad_check(value, gradient, &model.params().flatten(), h)
}

/// Aggregate evaluation output.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub perm_sensitivity: Option<f64>,
    pub scale_error: Option<f64>,
    pub scale_failed_scenes: Option<usize>,
    pub subject_sim: Option<f64>,
    pub gradcheck_max_rel_error: Option<f64>,
    pub loss_curve: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ProviderRegistry, HASHING_PROVIDER_ID};
    use crate::harness::scene::{gen_synthetic, render_video, SceneConfig};

    fn scenes(n: usize) -> (Vec<SyntheticScene>, Vec<TrainExample>) {
        let cfg = SceneConfig { min_subjects: 2, ..SceneConfig::default() };
        let s = gen_synthetic(11, n, &cfg).unwrap();
        let reg = ProviderRegistry::with_default(16, 0);
        let ex = s.iter().map(|x| TrainExample::from_scene(x, &reg, HASHING_PROVIDER_ID).unwrap()).collect();
        (s, ex)
    }

    #[test]
    fn ground_truth_has_zero_deviation() {
        let (s, _) = scenes(5);
        for scene in &s {
            let r = scale_deviation(&scene.video, scene).unwrap();
            assert_eq!(r.deviation, 0.0);
            assert!(!r.failed);
        }
    }

    #[test]
    fn swapped_sizes_deviate_by_ratio_difference() {
        let (s, _) = scenes(1);
        let mut scene = s[0].clone();
        scene.subjects.truncate(2);
        let mut big = scene.subjects[0].clone();
        let mut small = scene.subjects[1].clone();
        big.scale = 0.5;
        big.side = 2;
        big.origin = (0, 0);
        big.drift = (0, 0);
        small.scale = 0.25;
        small.side = 1;
        small.origin = (3, 3);
        small.drift = (0, 0);
        scene.subjects = vec![big.clone(), small.clone()];
        // rendered with the sizes swapped: 1:2 produced for 2:1 prescribed
        let (mut a, mut b) = (big.clone(), small.clone());
        a.side = 1;
        b.side = 2;
        b.origin = (2, 2);
        let (video, _) = render_video(&[a, b], 4, 4, 4);
        let r = scale_deviation(&video, &scene).unwrap();
        assert!((r.deviation - 1.5).abs() < 1e-15);
    }

    #[test]
    fn missing_subject_flags_scene() {
        let (s, _) = scenes(1);
        let scene = &s[0];
        let (video, _) = render_video(&scene.subjects[..1], 4, 4, 4);
        let r = scale_deviation(&video, scene).unwrap();
        assert!(r.failed);
        assert!(r.deviation > 0.0);
    }

    #[test]
    fn subject_sim_hand_computed() {
        // refs: e1 and e2; frames hold (e1, e1+e2), (e2), () respectively.
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let frames = vec![vec![vec![1.0, 0.0], vec![1.0, 1.0]], vec![vec![0.0, 3.0]], vec![]];
        let rep = subject_sim(&frames, &r).unwrap();
        // ref 1: (1 + 0 + 0) / 3; ref 2: (s + 1 + 0) / 3
        let want = ((1.0 + 0.0 + 0.0) / 3.0 + (s + 1.0 + 0.0) / 3.0) / 2.0;
        assert!((rep.score - want).abs() < 1e-12);
        assert_eq!(rep.empty_frames, vec![2]);
    }

    #[test]
    fn subject_sim_identity_and_orthogonal() {
        let r = vec![vec![0.3, -0.2, 0.9]];
        let frames = vec![r.clone(); 10];
        assert_eq!(subject_sim(&frames, &r).unwrap().score, 1.0);
        let ortho = vec![vec![vec![0.0, 1.0]]; 3];
        assert_eq!(subject_sim(&ortho, &[vec![1.0, 0.0]]).unwrap().score, 0.0);
    }

    #[test]
    fn ground_truth_video_matches_references() {
        let (s, _) = scenes(3);
        for scene in &s {
            let r = subject_sim_video(&scene.video, scene, &MeanColor).unwrap();
            assert!((r.score - 1.0).abs() < 1e-12, "{}", r.score);
            assert!(r.empty_frames.is_empty());
        }
    }

    #[test]
    fn fourier_is_invariant_and_sequential_is_not() {
        let (_, ex) = scenes(3);
        let model = Denoiser::new(DiTConfig::default(), 5, Init::Random).unwrap();
        for e in &ex {
            let f = eval_perm_sensitivity(&model, e, &Conditioner::Fourier(TrainConfig::default().fusion()), 2, 1).unwrap();
            assert_eq!(f, 0.0);
            let s = eval_perm_sensitivity(&model, e, &Conditioner::Sequential, 2, 1).unwrap();
            assert!(s > 0.0);
        }
    }

    #[test]
    fn perm_sensitivity_needs_two_references() {
        let (_, ex) = scenes(1);
        let mut e = ex[0].clone();
        e.references.truncate(1);
        let model = Denoiser::new(DiTConfig::default(), 5, Init::Standard).unwrap();
        assert!(eval_perm_sensitivity(&model, &e, &Conditioner::Sequential, 1, 0).is_err());
    }

    #[test]
    fn sampled_frames_are_spread() {
        assert_eq!(sample_frames(4, 10), vec![0, 1, 2, 3]);
        assert_eq!(sample_frames(20, 10), vec![0, 2, 4, 6, 8, 10, 12, 14, 16, 18]);
    }
}
