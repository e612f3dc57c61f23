use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mofu::checkpoint::Checkpoint;
use mofu::commands::read_fused;
use mofu::config::sha256_hex;
use mofu_core::conditioning::{encode_reference, preprocess_reference, ReferenceImage};
use mofu_core::dit::{DiTConfig, Denoiser, Init};
use mofu_core::harness::scene::render_reference;
use serde_json::Value;

fn mofu(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mofu"));
    cmd.current_dir(dir).args(args);
    for key in ["MOFU_CONFIG", "MOFU_SEED", "MOFU_OUT", "MOFU_SUITE", "MOFU_CUTOFF", "MOFU_CONDITIONER"] {
        cmd.env_remove(key);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: stdout {:?} stderr {:?}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn short_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("seed = 3\n\n[train]\nsteps = 12\ncheckpoint_every = 6\n{extra}")).unwrap();
    p
}

fn write_reference(dir: &Path, name: &str, r: &ReferenceImage) {
    mofu::raster::write_rgb(&dir.join(format!("{name}.png")), r.pixels()).unwrap();
    mofu::raster::write_mask(&dir.join(format!("{name}.mask.png")), r.mask()).unwrap();
}

fn references() -> Vec<ReferenceImage> {
    vec![
        render_reference([0.9, 0.2, 0.2], 0.5, 16, 2, 3).unwrap(),
        render_reference([0.2, 0.8, 0.3], 0.25, 16, 8, 1).unwrap(),
        render_reference([0.1, 0.3, 0.9], 0.75, 16, 0, 4).unwrap(),
    ]
}

#[test]
fn help_lists_every_command_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = mofu(dir.path(), &["--help"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["defaults", "data", "init", "fuse", "train", "eval", "--config", "--seed", "MOFU_SEED"] {
        assert!(text.contains(word), "missing {word} in\n{text}");
    }
    let text = String::from_utf8_lossy(&mofu(dir.path(), &["eval", "--help"], &[]).stdout).into_owned();
    for word in ["--suite", "--out", "MOFU_SUITE", "gradcheck", "subjectsim"] {
        assert!(text.contains(word), "missing {word} in\n{text}");
    }
    let text = String::from_utf8_lossy(&mofu(dir.path(), &["fuse", "--help"], &[]).stdout).into_owned();
    assert!(text.contains("--cutoff") && text.contains("MOFU_CUTOFF"));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "learning_rat = 0.1\n");
    let out = mofu(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--out", "run"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for run in ["a", "b"] {
        let out = mofu(dir.path(), &["--config", cfg, "train", "--out", run], &[]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/loss.csv"), read("b/loss.csv"));
    assert_eq!(read("a/metrics.json"), read("b/metrics.json"));
    assert_eq!(read("a/checkpoint.mofu"), read("b/checkpoint.mofu"));

    let csv = String::from_utf8(read("a/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,lr,l_scale,l_perm,l_spsl"));
    assert_eq!(lines.count(), 12);

    let report: Value = serde_json::from_slice(&read("a/report.json")).unwrap();
    assert_eq!(report["config_hash"], sha256_hex(&std::fs::read(cfg).unwrap()));
    assert!(report["duration_ms"].is_u64());

    let out = mofu(dir.path(), &["--config", cfg, "train", "--out", "c", "--resume", "a/checkpoint-000006.mofu"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read("c/checkpoint.mofu"), read("a/checkpoint.mofu"));
    let resumed = String::from_utf8(read("c/loss.csv")).unwrap();
    let tail: Vec<&str> = csv.lines().skip(7).collect();
    assert_eq!(resumed.lines().skip(1).collect::<Vec<_>>(), tail);

    // a checkpoint from another seed does not resume this config
    let out = mofu(dir.path(), &["--config", cfg, "--seed", "4", "train", "--out", "d", "--resume", "a/checkpoint-000006.mofu"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "base_lr = 1e300\n");
    let out = mofu(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--out", "run"], &[]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
    let ck = Checkpoint::load(&dir.path().join("run/last_good.mofu")).unwrap();
    assert!(ck.state.model.params().flatten().iter().all(|v| v.is_finite()));
    let rows = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap().lines().count() - 1;
    assert_eq!(ck.state.step as usize, rows);
    assert!(!dir.path().join("run/checkpoint.mofu").exists());
}

#[test]
fn corrupt_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = mofu(dir.path(), &["init", "--out", "ck.mofu"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let good = std::fs::read(dir.path().join("ck.mofu")).unwrap();
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    let mut version = good.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    for (name, bytes) in [("magic.mofu", magic), ("version.mofu", version), ("short.mofu", good[..100].to_vec())] {
        std::fs::write(dir.path().join(name), bytes).unwrap();
        let out = mofu(dir.path(), &["eval", "--checkpoint", name, "--suite", "perm"], &[]);
        assert_eq!(out.status.code(), Some(3), "{name}: {}", stderr(&out));
    }
    let out = mofu(dir.path(), &["eval", "--checkpoint", "absent.mofu", "--suite", "perm"], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_suite_passes_on_random_init() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mofu(dir.path(), &["init", "--random", "--out", "ck.mofu"], &[]).status.success());
    let out = mofu(dir.path(), &["eval", "--checkpoint", "ck.mofu", "--suite", "gradcheck", "--out", "ev"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = stdout_json(&out);
    assert!(r["metrics"]["gradcheck"]["max_rel_error"].as_f64().unwrap() < 1e-4);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(on_disk["metrics"], r["metrics"]);
}

#[test]
fn perm_suite_separates_fourier_from_sequential() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mofu(dir.path(), &["init", "--random", "--out", "ck.mofu"], &[]).status.success());
    let out = mofu(dir.path(), &["eval", "--checkpoint", "ck.mofu", "--suite", "perm"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["metrics"]["perm"]["perm_sensitivity"], 0.0);

    let out = mofu(dir.path(), &["eval", "--checkpoint", "ck.mofu"], &[("MOFU_SUITE", "perm"), ("MOFU_CONDITIONER", "sequential")]);
    assert_eq!(out.status.code(), Some(1));
    let r = stdout_json(&out);
    assert!(r["metrics"]["perm"]["perm_sensitivity"].as_f64().unwrap() > 0.0);
    assert_eq!(r["passed"], false);
}

#[test]
fn equal_config_hash_and_seed_give_equal_metrics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mofu(dir.path(), &["init", "--random", "--out", "ck.mofu"], &[]).status.success());
    let run = |seed: &str| {
        let out = mofu(dir.path(), &["eval", "--checkpoint", "ck.mofu", "--suite", "perm", "--conditioner", "sequential"], &[("MOFU_SEED", seed)]);
        stdout_json(&out)
    };
    let (a, b, c) = (run("5"), run("5"), run("6"));
    assert_eq!(a["seed"], 5);
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_eq!(a["metrics"], b["metrics"]);
    assert_ne!(a["metrics"], c["metrics"]);
}

#[test]
fn fuse_checks_masks_order_and_single_reference() {
    let dir = tempfile::tempdir().unwrap();
    let refs = references();

    // missing mask: one diagnostic per file, exit 3
    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    write_reference(&bad, "a", &refs[0]);
    mofu::raster::write_rgb(&bad.join("b.png"), refs[1].pixels()).unwrap();
    mofu::raster::write_rgb(&bad.join("c.png"), refs[2].pixels()).unwrap();
    let out = mofu(dir.path(), &["fuse", "--input", "bad", "--out", "x.mofu"], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("b.mask.png") && err.contains("c.mask.png"), "{err}");
    assert!(!dir.path().join("x.mofu").exists());

    // the same three references under names that sort differently
    for (sub, names) in [("one", ["a", "b", "c"]), ("two", ["z", "m", "b"])] {
        let d = dir.path().join(sub);
        std::fs::create_dir(&d).unwrap();
        for (r, n) in refs.iter().zip(names) {
            write_reference(&d, n, r);
        }
        let out = mofu(dir.path(), &["fuse", "--input", sub, "--out", &format!("{sub}.mofu"), "--cutoff", "0.4"], &[]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let r = stdout_json(&out);
        assert_eq!(r["metrics"]["perm_divergence"], 0.0);
        assert_eq!(r["metrics"]["orders_checked"], 6);
        assert_eq!(r["metrics"]["cutoff_ratio"], 0.4);
        assert!(dir.path().join(format!("{sub}.mofu.report.json")).is_file());
    }
    let one = std::fs::read(dir.path().join("one.mofu")).unwrap();
    assert_eq!(one, std::fs::read(dir.path().join("two.mofu")).unwrap());

    // one reference: the fused map is its encoded features
    let single = dir.path().join("single");
    std::fs::create_dir(&single).unwrap();
    write_reference(&single, "only", &refs[1]);
    let out = mofu(dir.path(), &["fuse", "--input", "single", "--out", "s.mofu"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let fused = read_fused(&dir.path().join("s.mofu")).unwrap();
    let reread = mofu::raster::read_reference(&single.join("only.png"), &single.join("only.mask.png")).unwrap();
    let model = Denoiser::new(DiTConfig::default(), 0, Init::Standard).unwrap();
    let x = preprocess_reference(&reread, 4, 4).unwrap();
    let want = encode_reference(&x, &model.encoder_params()).unwrap();
    assert!(fused.max_abs_diff(&want) < 1e-12, "{}", fused.max_abs_diff(&want));
}

#[test]
fn data_writes_rasters_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = mofu(dir.path(), &["data", "--out", "ds"], &[("MOFU_SEED", "2")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("ds/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    let scenes = manifest["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 20);
    for s in scenes {
        assert!(s["prompt"].as_str().unwrap().contains("square"));
        for f in s["frames"].as_array().unwrap() {
            assert!(dir.path().join("ds").join(f.as_str().unwrap()).is_file());
        }
        for sub in s["subjects"].as_array().unwrap() {
            assert!([0.25, 0.5, 0.75].contains(&sub["scale"].as_f64().unwrap()));
            assert!(dir.path().join("ds").join(sub["reference_mask"].as_str().unwrap()).is_file());
            assert_eq!(sub["masks"].as_array().unwrap().len(), 4);
        }
    }
    let again = mofu(dir.path(), &["data", "--out", "ds2"], &[("MOFU_SEED", "2")]);
    assert!(again.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("ds/manifest.json")).unwrap(),
        std::fs::read(dir.path().join("ds2/manifest.json")).unwrap()
    );
}

#[test]
fn defaults_output_loads_as_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = mofu(dir.path(), &["defaults"], &[]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("d.toml"), &out.stdout).unwrap();
    let out = mofu(dir.path(), &["--config", "d.toml", "init", "--out", "ck.mofu"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
}
