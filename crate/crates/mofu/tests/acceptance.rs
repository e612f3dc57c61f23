//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs under `cargo test`; use `cargo test --test acceptance` to run it alone.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mofu::checkpoint::Checkpoint;
use mofu::commands::{self, EvalArgs, Suite};
use mofu::config::{ConditionerKind, RunConfig};
use mofu_core::conditioning::{sca_forward, PromptEmbedding, ProviderRegistry, HASHING_PROVIDER_ID};
use mofu_core::dit::{Conditioner, DiTConfig, Denoiser, Init, Sublayer};
use mofu_core::fft::{fft2, ifft2, negate_bin};
use mofu_core::fusion::{decompose, fuse, radial_mask, BandWeights, Summation};
use mofu_core::harness::eval::{eval_perm_sensitivity, subject_sim};
use mofu_core::harness::scene::{gen_synthetic, SceneConfig};
use mofu_core::harness::TrainExample;
use mofu_core::losses::{
    all_permutations, permutation_loss, scale_loss, FusionSettings, MaskSet, NoHook, PermutationHook, SlotPerturbation,
    SpatialWeightMap, SCALE_EPS,
};
use mofu_core::optim::{adamw_step, AdamWConfig, CosineRestarts, Moments};
use mofu_core::params::ParamStore;
use mofu_core::rng::SeededRng;
use mofu_core::Tensor;
use serde_json::Value;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Criterion = fn(&Path) -> Outcome;

// ---------------------------------------------------------------- oracles

/// Direct O(N^2) DFT of one `h x w` plane; `sign = -1` forward, `+1` inverse (unscaled).
fn naive_dft(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = sign * 2.0 * PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    let (c, s) = (phase.cos(), phase.sin());
                    let (a, b) = (re[m * w + n], im[m * w + n]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            out_re[u * w + v] = sr;
            out_im[u * w + v] = si;
        }
    }
    (out_re, out_im)
}

/// High-frequency indicator from the folded distance to DC.
fn oracle_mask(h: usize, w: usize, cutoff: f64) -> Vec<f64> {
    let r = |u: usize, v: usize| {
        let fu = u.min(h - u) as f64 / h as f64;
        let fv = v.min(w - v) as f64 / w as f64;
        (fu * fu + fv * fv).sqrt()
    };
    let r_max = (0..h).flat_map(|u| (0..w).map(move |v| (u, v))).map(|(u, v)| r(u, v)).fold(0.0, f64::max);
    (0..h * w).map(|i| if r_max > 0.0 && r(i / w, i % w) / r_max > cutoff { 1.0 } else { 0.0 }).collect()
}

/// Fusion through the naive DFT: per plane, weighted band sums, inverse DFT, real part.
fn oracle_fuse(features: &[Tensor], cutoff: f64, bands: BandWeights) -> Tensor {
    let s = features[0].shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let mask = oracle_mask(h, w, cutoff);
    let mut out = Vec::with_capacity(d * h * w);
    for c in 0..d {
        let (mut acc_re, mut acc_im) = (vec![0.0; h * w], vec![0.0; h * w]);
        for f in features {
            let plane = &f.data()[c * h * w..(c + 1) * h * w];
            let (xr, xi) = naive_dft(plane, &vec![0.0; h * w], h, w, -1.0);
            for i in 0..h * w {
                let g = bands.high * mask[i] + bands.low * (1.0 - mask[i]);
                acc_re[i] += g * xr[i];
                acc_im[i] += g * xi[i];
            }
        }
        let (yr, _) = naive_dft(&acc_re, &acc_im, h, w, 1.0);
        out.extend(yr.iter().map(|v| v / (h * w) as f64));
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

fn random_features(rng: &mut SeededRng, n: usize, shape: &[usize]) -> Vec<Tensor> {
    (0..n).map(|_| rng.normal_tensor(shape)).collect()
}

// ---------------------------------------------------------------- criteria

fn permutation_invariance(_: &Path) -> Outcome {
    let mut rng = SeededRng::new(101);
    let (mut orderings, mut naive_max, mut canonical_ok) = (0usize, 0.0f64, true);
    let bands = BandWeights { high: 1.3, low: 0.7 };
    for n in 2..=4 {
        for shape in [[8, 4, 4], [3, 8, 8], [2, 5, 6]] {
            for _ in 0..3 {
                let feats = random_features(&mut rng, n, &shape);
                let refs: Vec<&Tensor> = feats.iter().collect();
                let base = fuse(&refs, 0.25, bands, Summation::Canonical).unwrap().feature;
                for order in all_permutations(n) {
                    let p: Vec<&Tensor> = order.iter().map(|&i| &feats[i]).collect();
                    canonical_ok &= fuse(&p, 0.25, bands, Summation::Canonical).unwrap().feature.bitwise_eq(&base);
                    naive_max = naive_max.max(fuse(&p, 0.25, bands, Summation::AsGiven).unwrap().feature.max_abs_diff(&base));
                    orderings += 1;
                }
            }
        }
    }
    let cfg = DiTConfig::default();
    let model = Denoiser::new(cfg.clone(), 102, Init::Random).unwrap();
    let canon = Conditioner::Fourier(FusionSettings::default());
    let given = Conditioner::Fourier(FusionSettings { summation: Summation::AsGiven, ..FusionSettings::default() });
    let (mut e2e_max, mut e2e_naive_max) = (0.0f64, 0.0f64);
    for n in 2..=4 {
        let refs: Vec<Tensor> = (0..n).map(|_| rng.uniform_tensor(&cfg.ref_shape(), 0.0, 1.0)).collect();
        let x = rng.normal_tensor(&cfg.latent_shape());
        let e = PromptEmbedding { vector: rng.normal_tensor(&[cfg.emb_dim]).into_data(), provider_id: "test".into() };
        let base = model.predict(&x, 0.4, &refs, Some(&e), &canon).unwrap();
        for order in all_permutations(n) {
            let p: Vec<Tensor> = order.iter().map(|&i| refs[i].clone()).collect();
            e2e_max = e2e_max.max(model.predict(&x, 0.4, &p, Some(&e), &canon).unwrap().max_abs_diff(&base));
            e2e_naive_max = e2e_naive_max.max(model.predict(&x, 0.4, &p, Some(&e), &given).unwrap().max_abs_diff(&base));
        }
    }
    outcome(
        canonical_ok && naive_max <= 1e-9 && e2e_max <= 1e-9 && e2e_naive_max <= 1e-9,
        format!(
            "{orderings} orderings, canonical bitwise={canonical_ok}, naive max {naive_max:.1e}; denoiser max {e2e_max:.1e} (naive {e2e_naive_max:.1e})"
        ),
    )
}

fn fusion_sum_equivalence(_: &Path) -> Outcome {
    let mut rng = SeededRng::new(201);
    let (mut sum_err, mut oracle_err, mut weighted_err) = (0.0f64, 0.0f64, 0.0f64);
    let unit = BandWeights { high: 1.0, low: 1.0 };
    for hw in [4, 8] {
        for n in 1..=4 {
            for cutoff in [0.1, 0.25, 0.5, 0.9] {
                let feats = random_features(&mut rng, n, &[3, hw, hw]);
                let refs: Vec<&Tensor> = feats.iter().collect();
                let fused = fuse(&refs, cutoff, unit, Summation::Canonical).unwrap().feature;
                let mut sum = Tensor::zeros([3, hw, hw]);
                for f in &feats {
                    sum.add_assign(f).unwrap();
                }
                sum_err = sum_err.max(fused.max_abs_diff(&sum));
                let oracle = oracle_fuse(&feats, cutoff, unit);
                oracle_err = oracle_err.max(fused.max_abs_diff(&oracle)).max(oracle.max_abs_diff(&sum));
                let bands = BandWeights { high: 0.6, low: 1.7 };
                let weighted = fuse(&refs, cutoff, bands, Summation::Canonical).unwrap().feature;
                weighted_err = weighted_err.max(weighted.max_abs_diff(&oracle_fuse(&feats, cutoff, bands)));
            }
        }
    }
    outcome(
        sum_err <= 1e-9 && oracle_err <= 1e-9 && weighted_err <= 1e-9,
        format!("4x4 and 8x8: |fuse - sum| {sum_err:.1e}, |fuse - naive DFT| {oracle_err:.1e}, non-unit bands vs naive DFT {weighted_err:.1e}"),
    )
}

fn spectral_soundness(_: &Path) -> Outcome {
    let mut rng = SeededRng::new(301);
    let extents = [1, 2, 3, 4, 5, 6, 8, 16];
    let (mut roundtrip, mut parseval) = (0.0f64, 0.0f64);
    let (mut complete, mut symmetric) = (true, true);
    for _ in 0..100 {
        let h = extents[rng.below(extents.len())];
        let w = extents[rng.below(extents.len())];
        let c = 1 + rng.below(3);
        let x = rng.normal_tensor(&[c, h, w]);
        let spec = fft2(&x).unwrap();
        roundtrip = roundtrip.max(ifft2(&spec).unwrap().max_abs_diff(&x));
        let energy = x.sum_squares();
        let spec_energy = spec.sum_norm_sqr() / (h * w) as f64;
        parseval = parseval.max((energy - spec_energy).abs() / energy);
        let mask = radial_mask(h, w, rng.uniform(0.01, 0.99)).unwrap();
        let (hf, lf) = decompose(&spec, &mask).unwrap();
        complete &= hf.add(&lf).unwrap().bitwise_eq(&spec);
        let g = mask.grid();
        for u in 0..h {
            for v in 0..w {
                symmetric &= g.get(&[u, v]).to_bits() == g.get(&[negate_bin(u, h), negate_bin(v, w)]).to_bits();
            }
        }
    }
    outcome(
        roundtrip <= 1e-9 && parseval <= 1e-8 && complete && symmetric,
        format!("100 inputs: roundtrip {roundtrip:.1e}, Parseval rel {parseval:.1e}, completeness bitwise={complete}, mask symmetry exact={symmetric}"),
    )
}

fn gradient_correctness(root: &Path) -> Outcome {
    let ck = root.join("grad.mofu");
    let report = commands::init(&RunConfig::default_loaded(), None, &ck, true).and_then(|_| {
        commands::eval(&EvalArgs { checkpoint: &ck, suite: Suite::Gradcheck, seed: Some(0), config: None, conditioner: None, out: None })
    });
    let report = match report {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let g = &report.metrics["gradcheck"];
    let err = g["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    outcome(
        report.passed && err < 1e-4,
        format!(
            "{} parameters, h = 1e-5: max relative error {err:.2e} (floor 1e-6; unfloored {:.2e})",
            g["n_params"],
            g["max_rel_error_unfloored"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn identity_at_init(_: &Path) -> Outcome {
    let mut all_identity = true;
    let mut all_equal = true;
    let mut nonzero = true;
    for shared in [false, true] {
        let cfg = DiTConfig { shared_adapter: shared, ..DiTConfig::default() };
        let standard = Denoiser::new(cfg.clone(), 401, Init::Standard).unwrap();
        let random = Denoiser::new(cfg.clone(), 402, Init::Random).unwrap();
        // random backbone, adapters exactly as initialized
        let mut params = ParamStore::new();
        for ((_, name, s), (_, _, r)) in standard.params().iter().zip(random.params().iter()) {
            let keep_standard = name.contains(".sca_") && (name.ends_with(".w2") || name.ends_with(".b2"));
            params.push(name, if keep_standard { s.clone() } else { r.clone() });
        }
        let model = Denoiser::from_params(cfg.clone(), params).unwrap();
        let mut rng = SeededRng::new(403);
        for _ in 0..5 {
            let e = PromptEmbedding { vector: rng.normal_tensor(&[cfg.emb_dim]).into_data(), provider_id: "test".into() };
            for b in 0..cfg.depth {
                for s in [Sublayer::Attention, Sublayer::FeedForward] {
                    for m in [&standard, &model] {
                        let p = sca_forward(&e, &m.adapter_params(b, s)).unwrap();
                        all_identity &= p.gamma.data().iter().all(|v| v.to_bits() == 1f64.to_bits());
                        all_identity &= p.beta.data().iter().chain(p.eta.data()).all(|v| v.to_bits() == 0f64.to_bits());
                    }
                }
            }
            let x = rng.normal_tensor(&cfg.latent_shape());
            let refs: Vec<Tensor> = (0..2).map(|_| rng.uniform_tensor(&cfg.ref_shape(), 0.0, 1.0)).collect();
            let cond = Conditioner::default();
            let a = model.predict(&x, 0.3, &refs, Some(&e), &cond).unwrap();
            let b = model.predict(&x, 0.3, &refs, None, &cond).unwrap();
            all_equal &= a.bitwise_eq(&b);
            nonzero &= a.max_abs() > 0.0;
        }
    }
    outcome(
        all_identity && all_equal && nonzero,
        format!("gamma=1, beta=0, eta=0 bitwise: {all_identity}; conditioned == unconditioned bitwise: {all_equal} (non-trivial output: {nonzero})"),
    )
}

struct OffsetAtSlotOne(Tensor);

impl PermutationHook for OffsetAtSlotOne {
    fn perturb(&self, order: &[usize], slot: usize) -> SlotPerturbation {
        let identity = order.iter().enumerate().all(|(i, &o)| i == o);
        if !identity && slot == 1 {
            SlotPerturbation { scale: 1.0, offset: Some(self.0.clone()) }
        } else {
            SlotPerturbation::NONE
        }
    }
}

fn loss_algebra(_: &Path) -> Outcome {
    let mut rng = SeededRng::new(501);
    let mut mse_err = 0.0f64;
    for shape in [[4, 4, 4, 4], [3, 2, 5, 7], [2, 4, 8, 8]] {
        for _ in 0..20 {
            let pred = rng.normal_tensor(&shape);
            let target = rng.normal_tensor(&shape);
            let err = pred.zip_map(&target, |p, t| (p - t) * (p - t)).unwrap();
            let mse = err.sum() / err.len() as f64;
            let l = scale_loss(&err, &SpatialWeightMap::uniform(shape[2], shape[3]), SCALE_EPS).unwrap();
            mse_err = mse_err.max((l - mse).abs());
        }
    }
    // a single element exposes the eps bias itself: L = MSE * N / (N + eps)
    let one = Tensor::full([1, 1, 1, 1], 1.5);
    let single = scale_loss(&one, &SpatialWeightMap::uniform(1, 1), SCALE_EPS).unwrap();
    let single_bias = (single - 1.5 / (1.0 + SCALE_EPS)).abs();
    let mut softmax_err = 0.0f64;
    for n in 1..=6 {
        for _ in 0..10 {
            let masks = (0..n).map(|_| Tensor::ones([2, 2])).collect();
            let ratios = (0..n).map(|_| rng.uniform(1e-3, 1.0)).collect();
            let w = MaskSet::new(masks, ratios).unwrap().weights().unwrap();
            softmax_err = softmax_err.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let settings = FusionSettings::default();
    let (mut faithful, mut hook_err, mut hook_min) = (0.0f64, 0.0f64, f64::INFINITY);
    for n in 2..=4 {
        let feats = random_features(&mut rng, n, &[4, 4, 4]);
        let refs: Vec<&Tensor> = feats.iter().collect();
        let p = (1..=n).product::<usize>() - 1;
        faithful = faithful.max(permutation_loss(&refs, p, &settings, &mut rng, &NoHook).unwrap().abs());
        let delta = rng.normal_tensor(&[4, 4, 4]).scale(0.3);
        let want = delta.sum_squares();
        let got = permutation_loss(&refs, p, &settings, &mut rng, &OffsetAtSlotOne(delta)).unwrap();
        hook_err = hook_err.max((got - want).abs());
        hook_min = hook_min.min(got);
    }
    outcome(
        mse_err <= 1e-12 && single_bias == 0.0 && softmax_err <= 1e-12 && faithful <= 1e-12 && hook_min > 0.0 && hook_err <= 1e-10,
        format!(
            "uniform-M vs MSE {mse_err:.1e} (latent-shaped maps), single-element bias matches N/(N+eps): {}; softmax sum {softmax_err:.1e}; faithful L_perm {faithful:.1e}; hook L_perm > 0 (min {hook_min:.2}), |L - |delta|^2| {hook_err:.1e}",
            single_bias == 0.0
        ),
    )
}

/// The default run; checkpoint_every changes only which files are written.
const EFFICACY_CONFIG: &str = "[train]\ncheckpoint_every = 250\n";

fn training_efficacy(root: &Path) -> Outcome {
    let cfg_path = root.join("efficacy.toml");
    std::fs::write(&cfg_path, EFFICACY_CONFIG).unwrap();
    let loaded = RunConfig::load(&cfg_path).unwrap();
    assert_eq!(loaded.config.train.steps, 500);
    let run = root.join("efficacy");
    let train = match commands::train(&loaded, None, &run, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("train failed: {e}")),
    };
    let eval = match commands::eval(&EvalArgs {
        checkpoint: &run.join(commands::FINAL_CHECKPOINT),
        suite: Suite::Scale,
        seed: None,
        config: None,
        conditioner: None,
        out: Some(&run.join("eval")),
    }) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("eval failed: {e}")),
    };
    let m = &train.metrics;
    let (first, last) = (m["loss_ma_first"].as_f64().unwrap(), m["loss_ma_last"].as_f64().unwrap());
    let s = &eval.metrics["scale"];
    let (trained, untrained) = (s["scale_deviation"].as_f64().unwrap(), s["untrained_scale_deviation"].as_f64().unwrap());
    let scored = s["scenes"].as_array().map(Vec::len).unwrap_or(0);
    outcome(
        last < 0.5 * first && trained < untrained,
        format!(
            "500 steps: loss MA50 {first:.3} -> {last:.3} (ratio {:.3} < 0.5); scale deviation {trained:.3} trained vs {untrained:.3} untrained over {scored} multi-subject scenes",
            last / first
        ),
    )
}

fn baseline_contrast(_: &Path) -> Outcome {
    let scenes = gen_synthetic(601, 20, &SceneConfig { min_subjects: 2, ..SceneConfig::default() }).unwrap();
    let reg = ProviderRegistry::with_default(16, 0);
    let model = Denoiser::new(DiTConfig::default(), 602, Init::Random).unwrap();
    let fourier = Conditioner::Fourier(FusionSettings::default());
    let (mut fourier_max, mut seq_min) = (0.0f64, f64::INFINITY);
    let mut every = true;
    for s in &scenes {
        let ex = TrainExample::from_scene(s, &reg, HASHING_PROVIDER_ID).unwrap();
        let f = eval_perm_sensitivity(&model, &ex, &fourier, 8, 603).unwrap();
        let q = eval_perm_sensitivity(&model, &ex, &Conditioner::Sequential, 8, 603).unwrap();
        fourier_max = fourier_max.max(f);
        seq_min = seq_min.min(q);
        every &= f == 0.0 && q > 0.0;
    }
    outcome(every, format!("20 scenes: Fourier sensitivity max {fourier_max:.1e}; sequential min {seq_min:.2e}"))
}

fn optimizer_schedule(_: &Path) -> Outcome {
    let mut adam_err = 0.0f64;
    for (theta, g, lr, wd, b1, b2, eps) in [
        (0.5, 0.2, 0.1, 0.01, 0.9, 0.999, 1e-8),
        (-1.3, -4.0, 1e-3, 0.0, 0.8, 0.99, 1e-6),
        (2.0, 1e-3, 0.05, 0.1, 0.5, 0.9, 1e-3),
        (0.0, 3.0, 0.2, 0.3, 0.95, 0.9999, 1e-8),
    ] {
        let cfg = AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut p = ParamStore::new();
        p.push("theta", Tensor::vector(vec![theta]));
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&cfg, &mut p, &[Tensor::vector(vec![g])], &mut mom, 1, lr).unwrap();
        // one step: m_hat = g, v_hat = g^2
        let want = theta - lr * (g / (g.abs() + eps) + wd * theta);
        adam_err = adam_err.max((p.tensors()[0].data()[0] - want).abs());
    }
    let mut lr_err = 0.0f64;
    for (base, period) in [(1e-3, 200u64), (0.5, 8), (1.0, 1000)] {
        let s = CosineRestarts::new(base, period).unwrap();
        let want = [base, base * (2.0 + 2f64.sqrt()) / 4.0, base / 2.0, base];
        for (step, w) in [0, period / 4, period / 2, period].into_iter().zip(want) {
            lr_err = lr_err.max((s.lr(step) - w).abs());
        }
    }
    outcome(adam_err <= 1e-12 && lr_err <= 1e-15, format!("AdamW vs closed form {adam_err:.1e}; lr at s in {{0, S/4, S/2, S}} {lr_err:.1e}"))
}

fn subject_sim_formula(_: &Path) -> Outcome {
    let refs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let frames = vec![
        vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]],
        vec![vec![1.0, 1.0, 0.0]],
        vec![vec![3.0, 0.0, 4.0], vec![0.0, 0.0, 1.0]],
    ];
    // frame means: (1 + 1)/2, (1/sqrt2 + 1/sqrt2)/2, (3/5 + 0)/2
    let want = (1.0 + std::f64::consts::FRAC_1_SQRT_2 + 0.3) / 3.0;
    let got = subject_sim(&frames, &refs).unwrap().score;
    let same = vec![refs.clone(), refs.clone(), refs.clone()];
    let identical = subject_sim(&same, &refs).unwrap().score;
    let scaled: Vec<Vec<Vec<f64>>> = frames.iter().map(|f| f.iter().map(|v| v.iter().map(|x| x * 7.5).collect()).collect()).collect();
    let homogeneous = subject_sim(&scaled, &refs).unwrap().score;
    outcome(
        (got - want).abs() <= 1e-12 && identical == 1.0 && (homogeneous - got).abs() <= 1e-12,
        format!("fixture {got:.15} vs {want:.15}; identical embeddings {identical:?}"),
    )
}

fn determinism_persistence(root: &Path) -> Outcome {
    let cfg_path = root.join("efficacy.toml");
    std::fs::write(&cfg_path, EFFICACY_CONFIG).unwrap();
    let loaded = RunConfig::load(&cfg_path).unwrap();
    let a = root.join("efficacy");
    if !a.join(commands::FINAL_CHECKPOINT).is_file() {
        if let Err(e) = commands::train(&loaded, None, &a, None) {
            return outcome(false, format!("first run failed: {e}"));
        }
    }
    let b = root.join("repeat");
    let c = root.join("resumed");
    if let Err(e) = commands::train(&loaded, None, &b, None) {
        return outcome(false, format!("repeat run failed: {e}"));
    }
    let mid = a.join(commands::checkpoint_name(250));
    if let Err(e) = commands::train(&loaded, None, &c, Some(&mid)) {
        return outcome(false, format!("resumed run failed: {e}"));
    }
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let csv_same = read(&a.join("loss.csv")) == read(&b.join("loss.csv"));
    let json_same = read(&a.join("metrics.json")) == read(&b.join("metrics.json"));
    let ck_same = read(&a.join(commands::FINAL_CHECKPOINT)) == read(&b.join(commands::FINAL_CHECKPOINT));
    let resume_same = read(&a.join(commands::FINAL_CHECKPOINT)) == read(&c.join(commands::FINAL_CHECKPOINT));
    let full = String::from_utf8(read(&a.join("loss.csv"))).unwrap_or_default();
    let tail: Vec<&str> = full.lines().skip(251).collect();
    let resumed = String::from_utf8(read(&c.join("loss.csv"))).unwrap_or_default();
    let tail_same = resumed.lines().skip(1).collect::<Vec<_>>() == tail && !tail.is_empty();
    let mut roundtrip = true;
    for p in [&mid, &a.join(commands::FINAL_CHECKPOINT)] {
        let bytes = read(p);
        roundtrip &= Checkpoint::decode(&bytes).map(|c| c.encode() == bytes).unwrap_or(false);
    }
    let eval_twice = (0..2)
        .map(|_| {
            commands::eval(&EvalArgs {
                checkpoint: &a.join(commands::FINAL_CHECKPOINT),
                suite: Suite::Perm,
                seed: Some(9),
                config: None,
                conditioner: Some(ConditionerKind::Sequential),
                out: None,
            })
            .map(|r| r.metrics_json())
            .unwrap_or_default()
        })
        .collect::<Vec<String>>();
    let eval_same = !eval_twice[0].is_empty() && eval_twice[0] == eval_twice[1];
    let eval_nonzero = serde_json::from_str::<Value>(&eval_twice[0])
        .map(|v| v["metrics"]["perm"]["perm_sensitivity"].as_f64().unwrap_or(0.0) > 0.0)
        .unwrap_or(false);
    outcome(
        csv_same && json_same && ck_same && resume_same && tail_same && roundtrip && eval_same,
        format!(
            "repeat run: csv {csv_same}, metrics.json {json_same}, checkpoint {ck_same}; save-load-save {roundtrip}; resume at 250: checkpoint {resume_same}, curve {tail_same}; eval report {eval_same} (sequential sensitivity > 0: {eval_nonzero})"
        ),
    )
}

fn main() {
    let criteria: &[(&str, Criterion, Option<u64>)] = &[
        ("permutation invariance", permutation_invariance, Some(30)),
        ("fusion-sum equivalence", fusion_sum_equivalence, Some(10)),
        ("spectral soundness", spectral_soundness, Some(10)),
        ("gradient correctness", gradient_correctness, Some(120)),
        ("identity at init", identity_at_init, None),
        ("loss algebra", loss_algebra, None),
        ("toy training efficacy", training_efficacy, Some(300)),
        ("baseline contrast", baseline_contrast, None),
        ("optimizer/schedule fidelity", optimizer_schedule, None),
        ("SubjectSim formula", subject_sim_formula, None),
        ("determinism & persistence", determinism_persistence, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut ran = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(root.path())));
        let took = start.elapsed();
        let mut o = result.unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if let Some(limit) = budget {
            if took > Duration::from_secs(*limit) {
                o.passed = false;
                o.detail.push_str(&format!("; over the {limit} s budget"));
            }
        }
        failed += usize::from(!o.passed);
        println!("{} {name} ({:.1} s): {}", if o.passed { "PASS" } else { "FAIL" }, took.as_secs_f64(), o.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
