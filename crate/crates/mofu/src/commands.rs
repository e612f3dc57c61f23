//! The subcommands. Each returns a report; `passed == false` means exit 1.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mofu_core::conditioning::{encode_reference, preprocess_reference};
use mofu_core::dit::{Conditioner, Denoiser, Init};
use mofu_core::fusion::{fuse as fuse_features, Summation};
use mofu_core::harness::eval::{eval_perm_sensitivity, eval_subject_sim};
use mofu_core::harness::train::{moving_average, train_step};
use mofu_core::harness::{eval_scale_consistency, gradcheck_spsl, TrainState};
use mofu_core::losses::{all_permutations, draw_permutations, LossReport};
use mofu_core::rng::SeededRng;
use mofu_core::{Error, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, Container};
use crate::config::{ConditionerKind, LoadedConfig, RunConfig};
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::raster::read_reference;
use crate::report::{blob_hash, tree_hash, Report};

/// Window of the loss moving average in training metrics.
pub const LOSS_WINDOW: usize = 50;
/// Orders checked by `fuse` when there are too many to enumerate.
pub const FUSE_CHECK_ORDERS: usize = 10;

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn mkdir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn effective(config: &LoadedConfig, seed: Option<u64>) -> RunConfig {
    let mut cfg = config.config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes the default configuration with a comment per key.
pub fn defaults() -> String {
    crate::config::defaults_reference()
}

/// A fresh checkpoint at step 0.
pub fn init(config: &LoadedConfig, seed: Option<u64>, out: &Path, random: bool) -> CliResult<Report> {
    let start = Instant::now();
    let cfg = effective(config, seed);
    let init = if random { Init::Random } else { Init::Standard };
    let model = Denoiser::new(cfg.model.clone(), cfg.seed, init)?;
    let state = TrainState::new(model, cfg.train.base_lr, cfg.seed);
    let ck = Checkpoint { config: cfg.clone(), state };
    let bytes = ck.encode();
    std::fs::write(out, &bytes).map_err(|e| CliError::io(out, e))?;
    Ok(Report {
        command: "init".into(),
        config_hash: config.hash(),
        input_hash: tree_hash(&[]),
        seed: cfg.seed,
        passed: true,
        metrics: json!({ "init": if random { "random" } else { "standard" }, "checkpoint_hash": blob_hash(&bytes) }),
        duration_ms: elapsed_ms(start),
    })
}

/// Writes the synthetic dataset to `out`.
pub fn data(config: &LoadedConfig, seed: Option<u64>, out: &Path) -> CliResult<Report> {
    let start = Instant::now();
    let cfg = effective(config, seed);
    let ds = dataset::build(&cfg)?;
    dataset::write(out, &ds, cfg.seed, &config.hash())?;
    let subjects: Vec<usize> = ds.scenes.iter().map(|s| s.subjects.len()).collect();
    let manifest = read_bytes(&out.join("manifest.json"))?;
    let report = Report {
        command: "data".into(),
        config_hash: config.hash(),
        input_hash: tree_hash(&[]),
        seed: cfg.seed,
        passed: true,
        metrics: json!({ "n_scenes": ds.scenes.len(), "subjects": subjects, "manifest_hash": blob_hash(&manifest) }),
        duration_ms: elapsed_ms(start),
    };
    report.write_dir(out)?;
    Ok(report)
}

#[derive(Serialize)]
struct CurveRow {
    step: u64,
    lr: f64,
    l_scale: f64,
    l_perm: f64,
    l_spsl: f64,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.mofu")
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.mofu";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.mofu";

/// Trains from scratch or from `resume`, writing `loss.csv`, checkpoints and
/// the report into `out`.
pub fn train(config: &LoadedConfig, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> CliResult<Report> {
    let start = Instant::now();
    let cfg = effective(config, seed);
    let ds = dataset::build(&cfg)?;
    let (mut state, input_hash) = match resume {
        Some(path) => {
            let bytes = read_bytes(path)?;
            let ck = Checkpoint::decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            if ck.config != cfg {
                return Err(CliError::Config(format!(
                    "{} was written under a different config or seed",
                    path.display()
                )));
            }
            (ck.state, tree_hash(&[("resume".into(), blob_hash(&bytes))]))
        }
        None => {
            let model = Denoiser::new(cfg.model.clone(), cfg.seed, Init::Standard)?;
            (TrainState::new(model, cfg.train.base_lr, cfg.seed), tree_hash(&[]))
        }
    };
    if state.step > cfg.train.steps {
        return Err(CliError::Config(format!("checkpoint is at step {}, past train.steps {}", state.step, cfg.train.steps)));
    }
    mkdir(out)?;
    let schedule = cfg.train.schedule().map_err(crate::error::config_err)?;
    let csv_path = out.join("loss.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let start_step = state.step;
    let mut losses: Vec<f64> = Vec::new();
    let mut last: Option<LossReport> = None;
    let save = |state: &TrainState, name: &str| Checkpoint { config: cfg.clone(), state: state.clone() }.save(&out.join(name));
    while state.step < cfg.train.steps {
        let step = state.step;
        match train_step(&state, &ds.examples, &cfg.train) {
            Ok((next, loss)) => {
                let row = CurveRow { step, lr: schedule.lr(step), l_scale: loss.l_scale, l_perm: loss.l_perm, l_spsl: loss.l_spsl };
                csv.serialize(row).map_err(|e| CliError::io(&csv_path, e))?;
                losses.push(loss.l_spsl);
                last = Some(loss);
                state = next;
                let every = cfg.train.checkpoint_every;
                if every > 0 && state.step % every == 0 && state.step < cfg.train.steps {
                    save(&state, &checkpoint_name(state.step))?;
                }
            }
            Err(e @ Error::NonFinite { .. }) => {
                csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
                save(&state, LAST_GOOD_CHECKPOINT)?;
                let report = Report {
                    command: "train".into(),
                    config_hash: config.hash(),
                    input_hash,
                    seed: cfg.seed,
                    passed: false,
                    metrics: json!({ "start_step": start_step, "failed_step": step, "error": e.to_string() }),
                    duration_ms: elapsed_ms(start),
                };
                report.write_dir(out)?;
                return Err(CliError::Failed(format!(
                    "non-finite loss at step {step}; last good state kept in {}",
                    out.join(LAST_GOOD_CHECKPOINT).display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
    }
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let ck = Checkpoint { config: cfg.clone(), state };
    let bytes = ck.encode();
    let final_path = out.join(FINAL_CHECKPOINT);
    std::fs::write(&final_path, &bytes).map_err(|e| CliError::io(&final_path, e))?;
    let mut metrics = json!({
        "start_step": start_step,
        "end_step": ck.state.step,
        "final": last,
        "checkpoint_hash": blob_hash(&bytes),
    });
    if losses.len() >= LOSS_WINDOW {
        let first = moving_average(&losses, LOSS_WINDOW - 1, LOSS_WINDOW);
        let last = moving_average(&losses, losses.len() - 1, LOSS_WINDOW);
        metrics["loss_ma_first"] = json!(first);
        metrics["loss_ma_last"] = json!(last);
        metrics["loss_ma_ratio"] = json!(last / first);
    }
    let report = Report {
        command: "train".into(),
        config_hash: config.hash(),
        input_hash,
        seed: cfg.seed,
        passed: true,
        metrics,
        duration_ms: elapsed_ms(start),
    };
    report.write_dir(out)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Perm,
    Scale,
    Subjectsim,
    Gradcheck,
    All,
}

impl Suite {
    fn includes(self, s: Suite) -> bool {
        self == Suite::All || self == s
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub suite: Suite,
    pub seed: Option<u64>,
    /// Replaces the data and eval settings stored in the checkpoint.
    pub config: Option<&'a LoadedConfig>,
    pub conditioner: Option<ConditionerKind>,
    pub out: Option<&'a Path>,
}

/// Runs the chosen suites against a checkpoint.
pub fn eval(args: &EvalArgs<'_>) -> CliResult<Report> {
    let start = Instant::now();
    let bytes = read_bytes(args.checkpoint)?;
    let ck = Checkpoint::decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", args.checkpoint.display())))?;
    let loaded = match args.config {
        Some(c) => c.clone(),
        None => LoadedConfig { bytes: ck.config.to_toml().into_bytes(), config: ck.config.clone() },
    };
    let mut cfg = loaded.config.clone();
    if cfg.model != ck.config.model {
        return Err(CliError::Config("config describes a different model than the checkpoint".into()));
    }
    if let Some(k) = args.conditioner {
        cfg.eval.conditioner = k;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let model = &ck.state.model;
    let needs_data = [Suite::Perm, Suite::Scale, Suite::Subjectsim].iter().any(|&s| args.suite.includes(s));
    let ds = if needs_data { Some(dataset::build(&cfg)?) } else { None };
    let steps = cfg.eval.sample_steps;
    let mut metrics = serde_json::Map::new();
    let mut passed = true;

    if args.suite.includes(Suite::Perm) {
        let ds = ds.as_ref().expect("dataset built");
        let conditioner = match cfg.eval.conditioner {
            ConditionerKind::Fourier => Conditioner::Fourier(cfg.train.fusion()),
            ConditionerKind::Sequential => Conditioner::Sequential,
        };
        let mut per_scene = Vec::new();
        let mut worst: f64 = 0.0;
        for (scene, ex) in ds.scenes.iter().zip(&ds.examples) {
            if ex.references.len() < 2 {
                continue;
            }
            let s = eval_perm_sensitivity(model, ex, &conditioner, steps, seed)?;
            worst = worst.max(s);
            per_scene.push(json!({ "scene": scene.id, "sensitivity": s }));
        }
        let ok = !per_scene.is_empty() && worst <= cfg.eval.perm_max;
        passed &= ok;
        metrics.insert(
            "perm".into(),
            json!({
                "conditioner": cfg.eval.conditioner,
                "perm_sensitivity": worst,
                "threshold": cfg.eval.perm_max,
                "scenes": per_scene,
                "passed": ok,
            }),
        );
    }
    if args.suite.includes(Suite::Scale) {
        let ds = ds.as_ref().expect("dataset built");
        let trained = eval_scale_consistency(model, &ds.scenes, &ds.examples, steps, seed)?;
        let untrained_model = Denoiser::new(cfg.model.clone(), cfg.seed, Init::Standard)?;
        let untrained = eval_scale_consistency(&untrained_model, &ds.scenes, &ds.examples, steps, seed)?;
        let ok = trained.mean_deviation < untrained.mean_deviation;
        passed &= ok;
        metrics.insert(
            "scale".into(),
            json!({
                "scale_deviation": trained.mean_deviation,
                "untrained_scale_deviation": untrained.mean_deviation,
                "failed_scenes": trained.failed,
                "scenes": trained.scenes,
                "passed": ok,
            }),
        );
    }
    if args.suite.includes(Suite::Subjectsim) {
        let ds = ds.as_ref().expect("dataset built");
        let score = eval_subject_sim(model, &ds.scenes, &ds.examples, steps, seed)?;
        let ok = score >= cfg.eval.subject_sim_min;
        passed &= ok;
        metrics.insert(
            "subjectsim".into(),
            json!({ "subject_sim": score, "threshold": cfg.eval.subject_sim_min, "passed": ok }),
        );
    }
    if args.suite.includes(Suite::Gradcheck) {
        let g = gradcheck_spsl(seed, cfg.eval.gradcheck_step)?;
        let (worst, floored) = g.max_error_floored(cfg.eval.gradcheck_floor);
        let ok = floored < cfg.eval.gradcheck_max;
        passed &= ok;
        metrics.insert(
            "gradcheck".into(),
            json!({
                "max_rel_error": floored,
                "worst_index": worst,
                "max_rel_error_unfloored": g.max_rel_error,
                "n_params": g.analytic.len(),
                "threshold": cfg.eval.gradcheck_max,
                "passed": ok,
            }),
        );
    }
    let report = Report {
        command: "eval".into(),
        config_hash: loaded.hash(),
        input_hash: tree_hash(&[("checkpoint".into(), blob_hash(&bytes))]),
        seed,
        passed,
        metrics: Value::Object(metrics),
        duration_ms: elapsed_ms(start),
    };
    if let Some(out) = args.out {
        mkdir(out)?;
        report.write_dir(out)?;
    }
    Ok(report)
}

/// Report path written next to a fused tensor file.
pub fn fuse_report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".report.json");
    out.with_file_name(name)
}

/// Image/mask pairs in `dir`: `name.png` with `name.mask.png`, sorted by name.
pub fn reference_pairs(dir: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") && !name.ends_with(".mask.png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::Io(format!("{}: no reference images (*.png)", dir.display())));
    }
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for name in names {
        let image = dir.join(&name);
        let mask = dir.join(format!("{}.mask.png", name.trim_end_matches(".png")));
        if mask.is_file() {
            pairs.push((image, mask));
        } else {
            eprintln!("mofu fuse: {}: missing mask {}", image.display(), mask.display());
            missing.push(name);
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Io(format!("{} reference(s) without a mask: {}", missing.len(), missing.join(", "))));
    }
    Ok(pairs)
}

pub struct FuseArgs<'a> {
    pub input: &'a Path,
    pub out: &'a Path,
    pub cutoff: Option<f64>,
    pub seed: Option<u64>,
    pub config: &'a LoadedConfig,
    /// Encoder weights; a fresh model under the config seed when absent.
    pub checkpoint: Option<&'a Path>,
}

#[derive(Serialize)]
struct FusedMeta {
    kind: &'static str,
    n_refs: usize,
    cutoff_ratio: f64,
    band_high: f64,
    band_low: f64,
}

/// Encodes and fuses every reference in a directory, then checks that
/// reordering the references leaves the result unchanged.
pub fn fuse(args: &FuseArgs<'_>) -> CliResult<Report> {
    let start = Instant::now();
    let cfg = effective(args.config, args.seed);
    let cutoff = args.cutoff.unwrap_or(cfg.train.cutoff_ratio);
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(CliError::Config(format!("cutoff {cutoff} outside (0, 1)")));
    }
    let pairs = reference_pairs(args.input)?;
    let (encoder, model_cfg, mut inputs) = match args.checkpoint {
        Some(p) => {
            let bytes = read_bytes(p)?;
            let ck = Checkpoint::decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            (ck.state.model.encoder_params(), ck.config.model, vec![("checkpoint".to_string(), blob_hash(&bytes))])
        }
        None => {
            let model = Denoiser::new(cfg.model.clone(), cfg.seed, Init::Standard)?;
            (model.encoder_params(), cfg.model.clone(), Vec::new())
        }
    };
    let mut features = Vec::new();
    for (image, mask) in &pairs {
        for p in [image, mask] {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            inputs.push((name, blob_hash(&read_bytes(p)?)));
        }
        let r = read_reference(image, mask)?;
        let x = preprocess_reference(&r, model_cfg.ref_height, model_cfg.ref_width).map_err(|e| CliError::io(image, e))?;
        features.push(encode_reference(&x, &encoder)?);
    }
    let bands = cfg.train.fusion().band_weights;
    let refs: Vec<&Tensor> = features.iter().collect();
    let fused = fuse_features(&refs, cutoff, bands, Summation::Canonical)?;
    let n = features.len();
    let orders = if n <= 4 {
        all_permutations(n)
    } else {
        draw_permutations(n, FUSE_CHECK_ORDERS, &mut SeededRng::derive(cfg.seed, "fuse-check", 0))?
    };
    let naive = fuse_features(&refs, cutoff, bands, Summation::AsGiven)?;
    let (mut divergence, mut naive_divergence, mut identical) = (0.0f64, 0.0f64, true);
    for order in &orders {
        let permuted: Vec<&Tensor> = order.iter().map(|&i| &features[i]).collect();
        let f = fuse_features(&permuted, cutoff, bands, Summation::Canonical)?;
        divergence = divergence.max(f.feature.max_abs_diff(&fused.feature));
        identical &= f.feature.bitwise_eq(&fused.feature);
        let g = fuse_features(&permuted, cutoff, bands, Summation::AsGiven)?;
        naive_divergence = naive_divergence.max(g.feature.max_abs_diff(&naive.feature));
    }
    let meta = FusedMeta { kind: "fused", n_refs: n, cutoff_ratio: cutoff, band_high: bands.high, band_low: bands.low };
    let container = Container {
        meta: serde_json::to_vec(&meta).expect("fused meta serializes"),
        tensors: vec![("fused".into(), fused.feature.clone())],
    };
    let bytes = container.encode();
    std::fs::write(args.out, &bytes).map_err(|e| CliError::io(args.out, e))?;
    let report = Report {
        command: "fuse".into(),
        config_hash: args.config.hash(),
        input_hash: tree_hash(&inputs),
        seed: cfg.seed,
        passed: identical,
        metrics: json!({
            "n_refs": n,
            "bitwise_identical": identical,
            "cutoff_ratio": cutoff,
            "orders_checked": orders.len(),
            "perm_divergence": divergence,
            "perm_divergence_naive": naive_divergence,
            "output_hash": blob_hash(&bytes),
        }),
        duration_ms: elapsed_ms(start),
    };
    crate::report::write_text(&fuse_report_path(args.out), &report.to_json())?;
    Ok(report)
}

/// Reads the tensor written by [`fuse`].
pub fn read_fused(path: &Path) -> CliResult<Tensor> {
    let c = Container::load(path)?;
    c.get("fused").cloned().ok_or_else(|| CliError::Io(format!("{}: no fused tensor", path.display())))
}
