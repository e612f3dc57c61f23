//! Run configuration: one TOML file, every key optional, unknown keys rejected.

use std::path::Path;

use mofu_core::conditioning::HASHING_PROVIDER_ID;
use mofu_core::dit::DiTConfig;
use mofu_core::harness::eval::{EVAL_SAMPLE_STEPS, GRADCHECK_FLOOR, GRADCHECK_STEP};
use mofu_core::harness::{SceneConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_scenes: usize,
    /// Prompt encoder id.
    pub provider: String,
    /// Seed of the prompt encoder's hash projection.
    pub embed_seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_scenes: 20, provider: HASHING_PROVIDER_ID.into(), embed_seed: 0, scene: SceneConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ConditionerKind {
    #[default]
    Fourier,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sample_steps: usize,
    pub conditioner: ConditionerKind,
    /// Largest tolerated permutation sensitivity.
    pub perm_max: f64,
    /// Smallest accepted mean SubjectSim.
    pub subject_sim_min: f64,
    pub gradcheck_step: f64,
    pub gradcheck_floor: f64,
    pub gradcheck_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_steps: EVAL_SAMPLE_STEPS,
            conditioner: ConditionerKind::Fourier,
            perm_max: 0.0,
            subject_sim_min: 0.5,
            gradcheck_step: GRADCHECK_STEP,
            gradcheck_floor: GRADCHECK_FLOOR,
            gradcheck_max: 1e-4,
        }
    }
}

/// A parsed config together with the bytes it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = Self::parse(text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(LoadedConfig { config, bytes })
    }

    /// The defaults as loaded when no file is given; hashed like a file.
    pub fn default_loaded() -> LoadedConfig {
        let config = RunConfig::default();
        let bytes = config.to_toml().into_bytes();
        LoadedConfig { config, bytes }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.data.scene.validate().map_err(config_err)?;
        let (m, s) = (&self.model, &self.data.scene);
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(CliError::Config(format!("{what}: model has {a}, scenes have {b}")))
        };
        if m.channels != 4 {
            return mismatch("latent channels", m.channels, 4);
        }
        if (m.frames, m.height, m.width) != (s.frames, s.height, s.width) {
            return Err(CliError::Config(format!(
                "latent extent: model {}x{}x{}, scenes {}x{}x{}",
                m.frames, m.height, m.width, s.frames, s.height, s.width
            )));
        }
        if m.ref_channels != 3 {
            return mismatch("reference channels", m.ref_channels, 3);
        }
        if m.ref_height != s.ref_out || m.ref_width != s.ref_out {
            return mismatch("reference extent", m.ref_height.max(m.ref_width), s.ref_out);
        }
        if m.max_refs < s.max_subjects {
            return mismatch("reference slots", m.max_refs, s.max_subjects);
        }
        if self.data.n_scenes == 0 {
            return Err(CliError::Config("data.n_scenes must be >= 1".into()));
        }
        if self.eval.sample_steps == 0 {
            return Err(CliError::Config("eval.sample_steps must be >= 1".into()));
        }
        let e = &self.eval;
        for (name, v) in [("gradcheck_step", e.gradcheck_step), ("gradcheck_floor", e.gradcheck_floor), ("gradcheck_max", e.gradcheck_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("eval.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line per key, placed above it in [`defaults_reference`].
const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "Master seed for scenes, weights, training draws and sampling noise."),
    ("model.depth", "Transformer blocks."),
    ("model.d_model", "Token width."),
    ("model.n_heads", "Attention heads; must divide d_model."),
    ("model.channels", "Latent channels (the synthetic latent has 4)."),
    ("model.frames", "Latent frames; must match data.scene.frames."),
    ("model.height", "Latent height; must match data.scene.height."),
    ("model.width", "Latent width; must match data.scene.width."),
    ("model.ref_channels", "Channels of a preprocessed reference (RGB)."),
    ("model.ref_height", "Preprocessed reference height; must match data.scene.ref_out."),
    ("model.ref_width", "Preprocessed reference width; must match data.scene.ref_out."),
    ("model.feat_dim", "Reference encoder output channels."),
    ("model.emb_dim", "Prompt embedding width."),
    ("model.ffn_mult", "Feed-forward hidden width as a multiple of d_model."),
    ("model.adapter_mult", "Scale adapter hidden width as a multiple of emb_dim."),
    ("model.shared_adapter", "One adapter pair for all blocks instead of one per block."),
    ("model.max_refs", "Reference slots of the sequential baseline."),
    ("train.steps", "Optimizer steps."),
    ("train.batch_size", "Scenes per step, drawn with replacement."),
    ("train.base_lr", "Peak learning rate. 1e-3 suits a two-block toy; large pretrained models use far less."),
    ("train.restart_period", "Cosine restart period in steps."),
    ("train.perm_count", "Permutations per sample for the permutation loss. Unset means min(3, N! - 1)."),
    ("train.cutoff_ratio", "Radial cutoff of the fusion mask, in (0, 1)."),
    ("train.band_high", "Weight of the high-frequency band."),
    ("train.band_low", "Weight of the low-frequency band."),
    ("train.checkpoint_every", "Write an intermediate checkpoint every this many steps (0 = end only)."),
    ("train.adam.beta1", "First moment decay."),
    ("train.adam.beta2", "Second moment decay."),
    ("train.adam.eps", "Denominator guard."),
    ("train.adam.weight_decay", "Decoupled weight decay."),
    ("train.loss_weights.scale", "Weight of the scale loss."),
    ("train.loss_weights.perm", "Weight of the permutation loss."),
    ("data.n_scenes", "Synthetic scenes in the dataset."),
    ("data.provider", "Prompt encoder id."),
    ("data.embed_seed", "Seed of the prompt encoder's hash projection."),
    ("data.scene.frames", "Frames per scene."),
    ("data.scene.height", "Frame height."),
    ("data.scene.width", "Frame width."),
    ("data.scene.min_subjects", "Fewest subjects per scene."),
    ("data.scene.max_subjects", "Most subjects per scene."),
    ("data.scene.scales", "Subject sides as fractions of the frame height."),
    ("data.scene.ref_size", "Side of a raw reference image."),
    ("data.scene.ref_out", "Side of a preprocessed reference."),
    ("data.scene.min_occupancy", "Smallest subject side as a fraction of the reference side."),
    ("data.scene.max_occupancy", "Largest subject side as a fraction of the reference side."),
    ("data.scene.max_drift", "Largest per-frame move along each axis."),
    ("data.scene.max_overlap", "Largest overlap between subjects, as a fraction of the smaller one."),
    ("data.scene.max_retries", "Placement attempts before a scene is rejected."),
    ("eval.sample_steps", "Euler steps per generation."),
    ("eval.conditioner", "Reference conditioner for the perm suite: fourier or sequential."),
    ("eval.perm_max", "perm passes when the sensitivity is at most this."),
    ("eval.subject_sim_min", "subjectsim passes when the mean score is at least this."),
    ("eval.gradcheck_step", "Central-difference step."),
    ("eval.gradcheck_floor", "Magnitude below which gradient errors are taken as absolute."),
    ("eval.gradcheck_max", "gradcheck passes when the floored relative error is below this."),
];

pub fn key_doc(key: &str) -> Option<&'static str> {
    KEY_DOCS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

/// Keys that are unset by default, shown commented out with an example value.
const UNSET_KEYS: &[(&str, &str, &str)] = &[("train", "perm_count", "3")];

fn push_unset(out: &mut String, section: &str) {
    for (sec, key, example) in UNSET_KEYS.iter().filter(|(s, _, _)| *s == section) {
        let doc = key_doc(&format!("{sec}.{key}")).unwrap_or_default();
        out.push_str(&format!("# {doc}\n# {key} = {example}\n"));
    }
}

/// The default config as TOML with a comment above every key.
pub fn defaults_reference() -> String {
    let body = RunConfig::default().to_toml();
    let mut out = String::from("# mofu run configuration. Every key is optional; these are the defaults.\n# Generated by `mofu defaults`.\n");
    let mut section = String::new();
    for line in body.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            push_unset(&mut out, &section);
            section = name.to_string();
            out.push('\n');
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if let Some(doc) = key_doc(&full) {
                out.push_str("# ");
                out.push_str(doc);
                out.push('\n');
            }
        } else if trimmed.is_empty() {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    push_unset(&mut out, &section);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&defaults_reference()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RunConfig::parse("[train]\nstepz = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = RunConfig::parse("[model]\ndepth = 1\nwidht = 2\n").unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn reference_file_is_current() {
        assert_eq!(include_str!("../defaults.toml"), defaults_reference(), "regenerate with `mofu defaults > crates/mofu/defaults.toml`");
    }

    #[test]
    fn every_key_is_documented() {
        let text = defaults_reference();
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.contains(" = ") && !line.starts_with('#') {
                assert!(i > 0 && lines[i - 1].starts_with("# "), "undocumented: {line}");
            }
        }
    }

    #[test]
    fn inconsistent_extents_are_config_errors() {
        let err = RunConfig::parse("[model]\nheight = 8\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::parse("[train]\ncutoff_ratio = 1.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::parse("[model]\nn_heads = 5\n").unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }

    #[test]
    fn hash_is_of_the_bytes() {
        let a = LoadedConfig { config: RunConfig::default(), bytes: b"seed = 0\n".to_vec() };
        assert_eq!(a.hash(), sha256_hex(b"seed = 0\n"));
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
