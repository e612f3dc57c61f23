//! The synthetic dataset in memory and on disk.

use std::path::Path;

use mofu_core::conditioning::ProviderRegistry;
use mofu_core::harness::{gen_synthetic, SyntheticScene, TrainExample};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{config_err, CliError, CliResult};
use crate::raster::{latent_frame_rgb, mask_frame, write_mask, write_rgb};
use crate::report::write_text;

pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub examples: Vec<TrainExample>,
}

/// Scenes and training examples determined by `(config, seed)`.
pub fn build(cfg: &RunConfig) -> CliResult<Dataset> {
    let scenes = gen_synthetic(cfg.seed, cfg.data.n_scenes, &cfg.data.scene).map_err(config_err)?;
    let registry = ProviderRegistry::with_default(cfg.model.emb_dim, cfg.data.embed_seed);
    registry.get(&cfg.data.provider).map_err(config_err)?;
    let examples = scenes
        .iter()
        .map(|s| TrainExample::from_scene(s, &registry, &cfg.data.provider))
        .collect::<mofu_core::Result<Vec<_>>>()?;
    Ok(Dataset { scenes, examples })
}

#[derive(Serialize)]
struct SubjectEntry {
    color: String,
    scale: f64,
    side: usize,
    origin: (i64, i64),
    drift: (i64, i64),
    occupancy: f64,
    reference: String,
    reference_mask: String,
    masks: Vec<String>,
}

#[derive(Serialize)]
struct SceneEntry {
    id: u64,
    prompt: String,
    frames: Vec<String>,
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    config_hash: String,
    scenes: Vec<SceneEntry>,
}

fn mkdir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// One directory per scene with frames, per-subject masks and references,
/// plus `manifest.json` at the root.
pub fn write(dir: &Path, data: &Dataset, seed: u64, config_hash: &str) -> CliResult<()> {
    mkdir(dir)?;
    let mut entries = Vec::new();
    for scene in &data.scenes {
        let name = format!("scene_{:04}", scene.id);
        let sdir = dir.join(&name);
        mkdir(&sdir.join("refs"))?;
        let frames = scene.video.shape()[1];
        let mut frame_files = Vec::new();
        for t in 0..frames {
            let f = format!("frame_{t:02}.png");
            write_rgb(&sdir.join(&f), &latent_frame_rgb(&scene.video, t))?;
            frame_files.push(format!("{name}/{f}"));
        }
        let mut subjects = Vec::new();
        for (k, s) in scene.subjects.iter().enumerate() {
            let mut masks = Vec::new();
            for t in 0..frames {
                let f = format!("mask_{k}_{t:02}.png");
                write_mask(&sdir.join(&f), &mask_frame(&scene.masks[k], t))?;
                masks.push(format!("{name}/{f}"));
            }
            write_rgb(&sdir.join(format!("refs/{k}.png")), s.reference.pixels())?;
            write_mask(&sdir.join(format!("refs/{k}.mask.png")), s.reference.mask())?;
            subjects.push(SubjectEntry {
                color: s.color_name.clone(),
                scale: s.scale,
                side: s.side,
                origin: s.origin,
                drift: s.drift,
                occupancy: s.occupancy,
                reference: format!("{name}/refs/{k}.png"),
                reference_mask: format!("{name}/refs/{k}.mask.png"),
                masks,
            });
        }
        entries.push(SceneEntry { id: scene.id, prompt: scene.prompt.clone(), frames: frame_files, subjects });
    }
    let manifest = Manifest { seed, config_hash: config_hash.into(), scenes: entries };
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}
