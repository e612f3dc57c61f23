//! Synthetic multi-subject scenes: drifting colored squares on a neutral
//! background, each with a zoomed reference image and an exact mask.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::conditioning::{preprocess_reference, ReferenceImage};
use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Latent channels: three centered color channels plus an occupancy channel.
pub const LATENT_CHANNELS: usize = 4;
/// Reference background color.
pub const REFERENCE_GRAY: f64 = 0.5;

/// Colors subjects are drawn from, by name.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];

/// Latent vector of an RGB color: `2c - 1` per channel, occupancy `+1`.
pub fn subject_latent(rgb: [f64; 3]) -> [f64; 4] {
    [2.0 * rgb[0] - 1.0, 2.0 * rgb[1] - 1.0, 2.0 * rgb[2] - 1.0, 1.0]
}

/// Latent vector of the empty background.
pub const BACKGROUND_LATENT: [f64; 4] = [0.0, 0.0, 0.0, -1.0];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_subjects: usize,
    pub max_subjects: usize,
    /// Subject side lengths as fractions of the frame height.
    pub scales: Vec<f64>,
    /// Side of the square reference image.
    pub ref_size: usize,
    /// Side of the preprocessed reference fed to the encoder.
    pub ref_out: usize,
    /// Subject side as a fraction of the reference side.
    pub min_occupancy: f64,
    pub max_occupancy: f64,
    /// Largest per-frame displacement along each axis.
    pub max_drift: usize,
    /// Largest tolerated intersection, as a fraction of the smaller square.
    pub max_overlap: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 4,
            width: 4,
            min_subjects: 1,
            max_subjects: 3,
            scales: alloc::vec![0.25, 0.5, 0.75],
            ref_size: 16,
            ref_out: 4,
            min_occupancy: 0.2,
            max_occupancy: 0.9,
            max_drift: 1,
            max_overlap: 0.0,
            max_retries: 500,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "SceneConfig";
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.ref_size == 0 || self.ref_out == 0 {
            return Err(invalid(op, "extents must be >= 1".into()));
        }
        if self.min_subjects == 0 || self.min_subjects > self.max_subjects || self.max_subjects > PALETTE.len() {
            return Err(invalid(
                op,
                format!("subject count range {}..={} (palette has {})", self.min_subjects, self.max_subjects, PALETTE.len()),
            ));
        }
        if self.scales.is_empty() {
            return Err(invalid(op, "at least one scale is required".into()));
        }
        for &s in &self.scales {
            let side = s * self.height as f64;
            if !(s > 0.0) || (side - libm::round(side)).abs() > 1e-9 || libm::round(side) as usize > self.height.min(self.width) {
                return Err(invalid(op, format!("scale {s} does not give a whole side inside a {}x{} frame", self.height, self.width)));
            }
        }
        if !(0.0 < self.min_occupancy && self.min_occupancy <= self.max_occupancy && self.max_occupancy <= 1.0) {
            return Err(invalid(op, format!("occupancy range {}..{}", self.min_occupancy, self.max_occupancy)));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(invalid(op, format!("max_overlap {} outside [0, 1]", self.max_overlap)));
        }
        Ok(())
    }

    pub fn side(&self, scale: f64) -> usize {
        libm::round(scale * self.height as f64) as usize
    }
}

/// One subject's geometry and reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub color_name: String,
    pub color: [f64; 3],
    /// Prescribed side as a fraction of frame height.
    pub scale: f64,
    pub side: usize,
    /// Top-left corner in frame 0, `(row, col)`.
    pub origin: (i64, i64),
    /// Displacement per frame, `(row, col)`.
    pub drift: (i64, i64),
    pub occupancy: f64,
    pub reference: ReferenceImage,
}

impl Subject {
    pub fn position(&self, frame: usize) -> (i64, i64) {
        (self.origin.0 + self.drift.0 * frame as i64, self.origin.1 + self.drift.1 * frame as i64)
    }

    pub fn latent(&self) -> [f64; 4] {
        subject_latent(self.color)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: u64,
    pub subjects: Vec<Subject>,
    /// `[4, T, H, W]` latent video.
    pub video: Tensor,
    /// Per subject, `[T, H, W]` binary masks.
    pub masks: Vec<Tensor>,
    pub prompt: String,
    /// Preprocessed references, `[3, ref_out, ref_out]`.
    pub references: Vec<Tensor>,
}

impl SyntheticScene {
    /// `scale_i / scale_j` for every pair `i < j`.
    pub fn prescribed_ratios(&self) -> Vec<(usize, usize, f64)> {
        let s = &self.subjects;
        let mut out = Vec::new();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                out.push((i, j, s[i].scale / s[j].scale));
            }
        }
        out
    }
}

/// Renders squares onto a `[4, T, H, W]` latent and returns per-subject masks.
pub fn render_video(subjects: &[Subject], frames: usize, h: usize, w: usize) -> (Tensor, Vec<Tensor>) {
    let mut video = Tensor::zeros([LATENT_CHANNELS, frames, h, w]);
    let plane = frames * h * w;
    for i in 0..plane {
        for (c, v) in BACKGROUND_LATENT.iter().enumerate() {
            video.data_mut()[c * plane + i] = *v;
        }
    }
    let mut masks = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut mask = Tensor::zeros([frames, h, w]);
        let lat = s.latent();
        for t in 0..frames {
            let (r0, c0) = s.position(t);
            for r in r0.max(0)..(r0 + s.side as i64).min(h as i64) {
                for c in c0.max(0)..(c0 + s.side as i64).min(w as i64) {
                    let off = (t * h + r as usize) * w + c as usize;
                    mask.data_mut()[off] = 1.0;
                    for (ch, v) in lat.iter().enumerate() {
                        video.data_mut()[ch * plane + off] = *v;
                    }
                }
            }
        }
        masks.push(mask);
    }
    (video, masks)
}

/// A `size x size` gray reference with a square of side `round(occupancy * size)`
/// at `(top, left)`.
pub fn render_reference(color: [f64; 3], occupancy: f64, size: usize, top: usize, left: usize) -> Result<ReferenceImage> {
    let side = reference_side(occupancy, size);
    if top + side > size || left + side > size {
        return Err(invalid("render_reference", format!("square of side {side} at ({top}, {left}) leaves a {size} image")));
    }
    let mut pixels = Tensor::full([3, size, size], REFERENCE_GRAY);
    let mut mask = Tensor::zeros([size, size]);
    for r in top..top + side {
        for c in left..left + side {
            mask.set(&[r, c], 1.0);
            for (ch, v) in color.iter().enumerate() {
                pixels.set(&[ch, r, c], *v);
            }
        }
    }
    ReferenceImage::new(pixels, mask)
}

pub fn reference_side(occupancy: f64, size: usize) -> usize {
    (libm::round(occupancy * size as f64) as usize).clamp(1, size)
}

fn overlap(a: &Subject, b: &Subject, frames: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..frames {
        let (ar, ac) = a.position(t);
        let (br, bc) = b.position(t);
        let dr = (ar + a.side as i64).min(br + b.side as i64) - ar.max(br);
        let dc = (ac + a.side as i64).min(bc + b.side as i64) - ac.max(bc);
        if dr > 0 && dc > 0 {
            let small = a.side.min(b.side).pow(2) as f64;
            worst = worst.max((dr * dc) as f64 / small);
        }
    }
    worst
}

/// `(origin, drift)` along one axis such that the square stays in frame.
fn place_axis(rng: &mut SeededRng, extent: usize, side: usize, frames: usize, max_drift: usize) -> (i64, i64) {
    let span = (extent - side) as i64;
    let last = frames as i64 - 1;
    let mut drift = rng.range_inclusive(-(max_drift as i64), max_drift as i64);
    if drift.abs() * last > span {
        drift = 0;
    }
    let lo = (-drift * last).max(0);
    let hi = span.min(span - drift * last);
    (rng.range_inclusive(lo, hi), drift)
}

pub fn size_word(scale: f64) -> &'static str {
    if scale <= 0.3 {
        "small"
    } else if scale <= 0.6 {
        "medium"
    } else {
        "large"
    }
}

pub fn ratio_phrase(ratio: f64) -> String {
    const NAMED: [(f64, &str); 7] = [
        (1.0, "the same size as"),
        (2.0, "twice as large as"),
        (3.0, "three times as large as"),
        (1.5, "one and a half times as large as"),
        (0.5, "half as large as"),
        (1.0 / 3.0, "a third as large as"),
        (2.0 / 3.0, "two thirds as large as"),
    ];
    match NAMED.iter().find(|(r, _)| (r - ratio).abs() < 1e-9) {
        Some((_, p)) => String::from(*p),
        None => format!("{ratio:.2} times as large as"),
    }
}

/// Prompt naming every subject with a size word and every pairwise ratio.
pub fn scene_prompt(subjects: &[Subject]) -> String {
    let parts: Vec<String> = subjects
        .iter()
        .map(|s| format!("a {} {} square", size_word(s.scale), s.color_name))
        .collect();
    let mut prompt = parts.join(" and ");
    for i in 0..subjects.len() {
        for j in i + 1..subjects.len() {
            let (a, b) = (&subjects[i], &subjects[j]);
            prompt.push_str(&format!(
                "; the {} square is {} the {} square",
                a.color_name,
                ratio_phrase(a.scale / b.scale),
                b.color_name
            ));
        }
    }
    prompt
}

fn draw_reference(rng: &mut SeededRng, color: [f64; 3], cfg: &SceneConfig) -> Result<(f64, ReferenceImage)> {
    let occupancy = rng.uniform(cfg.min_occupancy, cfg.max_occupancy);
    let side = reference_side(occupancy, cfg.ref_size);
    let top = rng.below(cfg.ref_size - side + 1);
    let left = rng.below(cfg.ref_size - side + 1);
    Ok((occupancy, render_reference(color, occupancy, cfg.ref_size, top, left)?))
}

/// Generates scene `id` from its own random stream.
pub fn gen_scene(seed: u64, id: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    let mut rng = SeededRng::derive(seed, "scene", id);
    let n = cfg.min_subjects + rng.below(cfg.max_subjects - cfg.min_subjects + 1);
    let colors = rng.choose_distinct(PALETTE.len(), n);
    let mut refs = Vec::with_capacity(n);
    for &c in &colors {
        refs.push(draw_reference(&mut rng, PALETTE[c].1, cfg)?);
    }
    for _ in 0..cfg.max_retries {
        let mut subjects: Vec<Subject> = Vec::with_capacity(n);
        for (k, &c) in colors.iter().enumerate() {
            let scale = cfg.scales[rng.below(cfg.scales.len())];
            let side = cfg.side(scale);
            let (r0, dr) = place_axis(&mut rng, cfg.height, side, cfg.frames, cfg.max_drift);
            let (c0, dc) = place_axis(&mut rng, cfg.width, side, cfg.frames, cfg.max_drift);
            let (name, rgb) = PALETTE[c];
            subjects.push(Subject {
                color_name: String::from(name),
                color: rgb,
                scale,
                side,
                origin: (r0, c0),
                drift: (dr, dc),
                occupancy: refs[k].0,
                reference: refs[k].1.clone(),
            });
        }
        let clash = (0..n).any(|i| (i + 1..n).any(|j| overlap(&subjects[i], &subjects[j], cfg.frames) > cfg.max_overlap));
        if clash {
            continue;
        }
        let (video, masks) = render_video(&subjects, cfg.frames, cfg.height, cfg.width);
        let references = subjects
            .iter()
            .map(|s| preprocess_reference(&s.reference, cfg.ref_out, cfg.ref_out))
            .collect::<Result<Vec<_>>>()?;
        let prompt = scene_prompt(&subjects);
        return Ok(SyntheticScene { id, subjects, video, masks, prompt, references });
    }
    Err(Error::Placement { scene: id, retries: cfg.max_retries })
}

/// `n_scenes` scenes with ids `0..n_scenes`.
pub fn gen_synthetic(seed: u64, n_scenes: usize, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    if n_scenes == 0 {
        return Err(invalid("gen_synthetic", "n_scenes must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n_scenes as u64).map(|id| gen_scene(seed, id, cfg)).collect()
}
