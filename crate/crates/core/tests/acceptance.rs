//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) before asserting, so a plain `cargo test`
//! log shows every criterion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cssstn::cli::config::ExperimentConfig;
use cssstn::cli::{ArtifactCache, Runner};
use cssstn::eeg_io::SplitMode;
use cssstn::evaluate::{balanced_accuracy, ConfusionCounts, TransferReport};
use cssstn::models::nn::{Mode, Params};
use cssstn::models::{Classifier, ClassifierConfig, Generator, GeneratorConfig};
use cssstn::preprocess::{
    filter_signal, frequency_response, morlet_cwt, preprocess_pipeline, FeatureSet, FilterSpec, MorletParams, PipelineInput,
    PreprocessConfig,
};
use cssstn::synthdata::{generate_raw, generate_subject, SynthSpec};
use cssstn::training::{
    ce_logit_grad, compute_class_templates, content_loss, semantic_loss, style_loss, train_generator, transfer_objective,
    weighted_ce_loss, LossSwitches, TemplateId, TemplateMode, TransferConfig, Variant, VecRecorder,
};

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {:<5} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{criterion}: {detail}");
}

fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Central-difference check over every parameter of `params`. Returns the
/// worst relative error, with a floor of 1e-4 on the denominator.
fn fd_worst(params: &Params, analytic: &[Vec<f64>], loss: &dyn Fn(&Params) -> f64) -> (f64, usize) {
    let eps = 1e-6;
    let mut p = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for b in 0..p.blocks.len() {
        for i in 0..p.blocks[b].values.len() {
            let orig = p.blocks[b].values[i];
            p.blocks[b].values[i] = orig + eps;
            let up = loss(&p);
            p.blocks[b].values[i] = orig - eps;
            let down = loss(&p);
            p.blocks[b].values[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[b][i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
            checked += 1;
        }
    }
    (worst, checked)
}

fn small_nets(attention: bool) -> (Generator, Classifier, Classifier) {
    let mut g = Generator::new(GeneratorConfig {
        channels: 2,
        image_size: 8,
        encoder_widths: [3, 4, 4],
        decoder_widths: [4, 3, 3],
        attention,
        residual: true,
        output_init_scale: 1.0,
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap();
    for b in &mut g.net.params.blocks {
        if b.name.ends_with("attn.gamma") {
            b.values[0] = 0.4;
        }
    }
    let net = |seed| {
        Classifier::new(ClassifierConfig { in_channels: 2, image_size: 8, widths: [3, 4, 4], hidden: 6, seed, ..ClassifierConfig::default() })
            .unwrap()
    };
    (g, net(1), net(2))
}

fn toy_set(n: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    let values = ndarray::Array4::from_shape_fn((n, 2, 8, 8), |(i, c, y, _)| {
        let s = if labels[i] == 1 && c == 0 && y < 4 { 1.0 } else { 0.0 };
        (s + rng.gen_range(-0.5..0.5)) as f32
    });
    FeatureSet { values, labels, subject_id: "toy".into(), acquisition_order: (0..n).collect() }
}

#[test]
fn loss_correctness() {
    let started = std::time::Instant::now();
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };

    // Hand values.
    check("wce target", close(weighted_ce_loss(&[0.2, 0.8], 1, [1.0, 10.0]).unwrap().value, 10.0 * -(0.8f64.ln()), 1e-6));
    check("wce value", close(weighted_ce_loss(&[0.2, 0.8], 1, [1.0, 10.0]).unwrap().value, 2.2314355, 1e-6));
    check("wce perfect", weighted_ce_loss(&[0.0, 1.0], 1, [1.0, 10.0]).unwrap().value == 0.0);
    check("wce uniform", close(weighted_ce_loss(&[0.5, 0.5], 0, [1.0, 10.0]).unwrap().value, std::f64::consts::LN_2, 1e-6));
    check("sem perfect", semantic_loss(&[1.0, 0.0], 0).unwrap().value == 0.0);
    check("sem uniform", close(semantic_loss(&[0.5, 0.5], 1).unwrap().value, std::f64::consts::LN_2, 1e-6));
    let p = Array3::from_shape_vec((3, 1, 1), vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]).unwrap();
    let q = Array3::from_shape_vec((3, 1, 1), vec![0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()]).unwrap();
    check("kl value", close(style_loss(&p, &q).unwrap(), 0.25 * 2f64.ln(), 1e-6));
    check("kl self", close(style_loss(&p, &p).unwrap(), 0.0, 1e-12));
    let a = rand3((2, 3, 4), 1);
    let b = rand3((2, 3, 4), 2);
    let brute = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    check("mse brute", close(content_loss(&a, &b).unwrap(), brute, 1e-6));
    check("mse shift", close(content_loss(&(&a + 1.0), &a).unwrap(), 1.0, 1e-6));

    // Classifier parameter gradients of the weighted cross-entropy.
    let (_, c, _) = small_nets(false);
    let x = rand3((2, 8, 8), 3);
    let label = 1u8;
    let weights = [1.0, 10.0];
    let mut grads = c.net.params.zeros_like();
    let (out, tape) = c.forward_tape(&x, &mut Mode::Eval).unwrap();
    c.backward(&tape, Some(ce_logit_grad(&out.probs, label, weights[1])), Default::default(), Some(&mut grads)).unwrap();
    let stages = c.net.stages.clone();
    let cfg = c.config.clone();
    let (worst_c, n_c) = fd_worst(&c.net.params, &grads.blocks, &|p| {
        let c = Classifier { config: cfg.clone(), net: cssstn::models::nn::Network { params: p.clone(), stages: stages.clone() } };
        weighted_ce_loss(&c.forward(&x, &mut Mode::Eval).unwrap().probs, label, weights).unwrap().value
    });
    check("classifier fd", worst_c <= 1e-4);

    // Generator gradients of the full transfer objective, every loss and every layer on.
    let (g, c_t, c_s) = small_nets(true);
    let source = toy_set(12, 4);
    let templates = compute_class_templates(&source, &c_s, TemplateMode::InputMean).unwrap();
    let tcfg = TransferConfig { feature_layers: vec![1, 2, 3], ..TransferConfig::default() };
    let targets: Vec<(Array3<f64>, u8)> = vec![(rand3((2, 8, 8), 7), 1), (rand3((2, 8, 8), 8), 0)];
    let (_, tgrads) = transfer_objective(&g, &targets, &c_t, &c_s, &templates, &tcfg).unwrap();
    let g_stages = g.net.stages.clone();
    let g_cfg = g.config.clone();
    let (worst_g, n_g) = fd_worst(&g.net.params, &tgrads.blocks, &|p| {
        let g = Generator { config: g_cfg.clone(), net: cssstn::models::nn::Network { params: p.clone(), stages: g_stages.clone() } };
        transfer_objective(&g, &targets, &c_t, &c_s, &templates, &tcfg).unwrap().0.total
    });
    check("transfer fd", worst_g <= 1e-4);
    check("param budget", c.param_count() <= 5000 && g.param_count() <= 5000);

    verdict(
        "loss correctness",
        fails.is_empty(),
        &format!(
            "failed {fails:?}; classifier fd worst rel {worst_c:.2e} over {n_c} params; transfer fd worst rel {worst_g:.2e} over {n_g} params; {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn class_sensitivity_invariant() {
    let (_, c_t, c_s) = small_nets(false);
    let source = toy_set(18, 1);
    let target = toy_set(15, 2);
    let templates = compute_class_templates(&source, &c_s, TemplateMode::InputMean).unwrap();
    let base = TransferConfig {
        epochs: 2,
        batch_size: 4,
        generator: GeneratorConfig { encoder_widths: [2, 2, 2], decoder_widths: [2, 2, 2], ..GeneratorConfig::default() },
        ..TransferConfig::default()
    };
    let mut detail = Vec::new();
    let mut pass = true;
    for (variant, expect_class) in [(Variant::Full, true), (Variant::NoClass, false)] {
        let cfg = variant.apply(&base);
        let rec = VecRecorder::default();
        let h = train_generator(&target, &c_t, &c_s, &templates, &cfg, Some(&rec)).unwrap().history;
        let seen = rec.0.into_inner().unwrap();
        let matching = seen
            .iter()
            .filter(|(i, label, tid)| {
                *label == target.labels[*i] && *tid == if expect_class { TemplateId::Class(*label) } else { TemplateId::Pooled }
            })
            .count();
        pass &= seen.len() == cfg.epochs * h.train_size && matching == seen.len();
        detail.push(format!("class_sensitive={}: {matching}/{} as expected", cfg.class_sensitive, seen.len()));
    }
    verdict("class-sensitivity invariant", pass, &detail.join("; "));
}

#[test]
fn balanced_accuracy_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.gen_range(2..200);
        let p_target = rng.gen_range(0.02..0.9);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p_target))).collect();
        let preds: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        sets += 1;
        // Independent recomputation: a 2×2 table indexed by (label, prediction).
        let mut table = [[0u64; 2]; 2];
        for (&y, &p) in labels.iter().zip(&preds) {
            table[y as usize][p as usize] += 1;
        }
        let recall = |k: usize| table[k][k] as f64 / (table[k][0] + table[k][1]) as f64;
        let expected = (recall(1) + recall(0)) / 2.0;
        let got = balanced_accuracy(&ConfusionCounts::from_predictions(&preds, &labels).unwrap()).unwrap();
        if got != expected {
            mismatches += 1;
        }
    }
    verdict("balanced accuracy metric", mismatches == 0, &format!("{mismatches} mismatches over {sets} random sets"));
}

#[test]
fn pipeline_shape_contract() {
    let started = std::time::Instant::now();
    let spec = SynthSpec { channels: 64, sampling_rate: 1000.0, epochs_per_subject: 6, ..SynthSpec::default() };
    let raw = generate_raw(&spec, 0, 1, 1.0).unwrap();
    let features = preprocess_pipeline(&PipelineInput::Raw(raw), &PreprocessConfig::default()).unwrap();
    let shape_ok = features.values.dim() == (6, 64, 64, 64) && features.values.iter().all(|v| v.is_finite());

    let params = MorletParams::default();
    let x = Array2::from_shape_fn((3, 250), |(c, t)| ((c * 17 + t) as f64 * 0.29).sin() + 0.3 * ((t as f64) * 0.05).cos());
    let base = morlet_cwt(x.view(), &params, 250.0).unwrap();
    let zero_ok = morlet_cwt(Array2::<f64>::zeros((3, 250)).view(), &params, 250.0).unwrap().iter().all(|&v| v == 0.0);
    let mut homog_ok = true;
    for a in [0.0, 0.5, 2.0, 7.25] {
        let scaled = morlet_cwt((&x * a).view(), &params, 250.0).unwrap();
        homog_ok &= scaled.iter().zip(base.iter()).all(|(s, b)| (s - a * b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
    let negated = morlet_cwt((&x * -1.0).view(), &params, 250.0).unwrap();
    let sign_ok = negated.iter().zip(base.iter()).all(|(s, b)| (s - b).abs() <= 1e-12);

    // Filter: design response and measured steady-state tone gains at the raw rate.
    let fs = 1000.0;
    let fspec = FilterSpec::default();
    let taps = fspec.design(fs).unwrap();
    let db = |g: f64| 20.0 * g.abs().max(1e-300).log10();
    let mut stop_worst = f64::NEG_INFINITY;
    let mut f = 2.0 * fspec.high_hz;
    while f < fs / 2.0 {
        stop_worst = stop_worst.max(db(frequency_response(&taps, f / fs)));
        f += 0.5;
    }
    let mut pass_worst = 0.0f64;
    for f in [4.0, 8.0, 10.0, 15.0, 20.0, 25.0] {
        pass_worst = pass_worst.max(db(frequency_response(&taps, f / fs)).abs());
    }
    let n = 20_000;
    let tone = |f: f64| Array2::from_shape_fn((1, n), |(_, t)| (2.0 * std::f64::consts::PI * f * t as f64 / fs).sin());
    let rms = |a: ndarray::ArrayView1<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
    let measured = |f: f64| {
        let y = filter_signal(tone(f).view(), &fspec, fs).unwrap();
        let mid = y.slice(ndarray::s![0, n / 4..3 * n / 4]).to_owned();
        db(rms(mid.view()) / std::f64::consts::FRAC_1_SQRT_2)
    };
    let measured_stop = [60.0, 100.0, 250.0].map(measured).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let measured_pass = [10.0, 20.0].map(measured).into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let filter_ok = stop_worst <= -40.0 && measured_stop <= -40.0 && pass_worst <= 1.0 && measured_pass <= 1.0;

    verdict(
        "pipeline shape contract",
        shape_ok && zero_ok && homog_ok && sign_ok && filter_ok,
        &format!(
            "features {:?}; cwt zero {zero_ok} homogeneity {homog_ok} sign {sign_ok}; stopband max {stop_worst:.1} dB (tones {measured_stop:.1} dB); passband ripple {pass_worst:.3} dB (tones {measured_pass:.3} dB); {:.1}s",
            features.values.dim(),
            started.elapsed().as_secs_f64()
        ),
    );
}

/// Reports of one seed on the golden/illiterate pair.
struct SeedRuns {
    /// Earliest-25% target budget: full and no-class variants.
    quarter: Vec<TransferReport>,
    /// Whole training folds, full variant.
    whole: TransferReport,
}

fn pair_features(cfg: &ExperimentConfig) -> (FeatureSet, FeatureSet) {
    let subject = |i| {
        let set = generate_subject(&cfg.synth, i, cfg.synth.mixing_seed).unwrap();
        preprocess_pipeline(&PipelineInput::Epochs(set), &cfg.preprocess).unwrap()
    };
    (subject(0), subject(1))
}

/// Runs every seed once; the second value is the wall time of the 25%
/// runs, which make up the transfer-improvement experiment.
fn transfer_runs() -> &'static (Vec<SeedRuns>, f64) {
    static RUNS: OnceLock<(Vec<SeedRuns>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut transfer_secs = 0.0;
        let cache_dir = tempfile::tempdir().unwrap();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let base = ExperimentConfig::desk_scale().with_seed(seed);
                assert_eq!(base.synth.skills, vec![1.0, 0.3]);
                assert_eq!(base.synth.separation, 5.0);
                let (golden, illiterate) = pair_features(&base);
                let mut runner = Runner::with_dirs(Some(ArtifactCache::new(cache_dir.path().to_path_buf())), None);

                let mut quarter_cfg = base.clone();
                quarter_cfg.set_budget(0.25, SplitMode::Earliest);
                quarter_cfg.protocol.variants = vec![Variant::Full, Variant::NoClass];
                let started = std::time::Instant::now();
                let quarter = runner.run_pair(&illiterate, &golden, &quarter_cfg).unwrap();
                transfer_secs += started.elapsed().as_secs_f64();

                let mut whole_cfg = base;
                whole_cfg.protocol.variants = vec![Variant::Full];
                let whole = runner.run_pair(&illiterate, &golden, &whole_cfg).unwrap().remove(0);
                for r in quarter.iter().chain([&whole]) {
                    let _ = std::io::stderr().write_all(
                        format!(
                            "  seed {seed} {:<18} budget {:<4} ensemble {:.3} baseline {:.3} source path {:.3}\n",
                            r.variant,
                            r.config["protocol"]["budget"]["fraction"],
                            r.mean,
                            r.baseline_mean,
                            r.folds.iter().map(|f| f.source_bacc).sum::<f64>() / r.folds.len() as f64
                        )
                        .as_bytes(),
                    );
                }
                SeedRuns { quarter, whole }
            })
            .collect();
        (runs, transfer_secs)
    })
}

fn by_variant<'a>(reports: &'a [TransferReport], v: Variant) -> &'a TransferReport {
    reports.iter().find(|r| r.variant == v.label()).expect("variant report")
}

#[test]
fn transfer_improvement() {
    let (runs, secs) = transfer_runs();
    let deltas: Vec<f64> = runs.iter().map(|r| by_variant(&r.quarter, Variant::Full)).map(|r| r.mean - r.baseline_mean).collect();
    let improved = deltas.iter().filter(|&&d| d >= 0.05).count();
    let never_negative = deltas.iter().all(|&d| d >= -0.02);
    verdict(
        "transfer improvement",
        improved >= 2 && never_negative && *secs < 15.0 * 60.0,
        &format!("ensemble minus baseline per seed {deltas:.3?}; {improved}/3 at +0.05; all above -0.02: {never_negative}; transfer runs {secs:.0}s"),
    );
}

#[test]
fn ablation_ordering() {
    let (runs, _) = transfer_runs();
    let pairs: Vec<(f64, f64)> =
        runs.iter().map(|r| (by_variant(&r.quarter, Variant::NoClass).mean, by_variant(&r.quarter, Variant::Full).mean)).collect();
    let ordered = pairs.iter().filter(|(no_class, full)| no_class < full).count();
    verdict("ablation ordering", ordered >= 2, &format!("(w/o class, full) per seed {pairs:.3?}; {ordered}/3 ordered"));
}

#[test]
fn data_budget() {
    let (runs, _) = transfer_runs();
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (by_variant(&r.quarter, Variant::Full).mean, r.whole.mean)).collect();
    let within = pairs.iter().filter(|(q, w)| (q - w).abs() <= 0.05).count();
    verdict("data budget", within >= 2, &format!("(25%, 100%) per seed {pairs:.3?}; {within}/3 within 0.05"));
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn determinism() {
    let mut cfg = ExperimentConfig::desk_scale().with_seed(11);
    cfg.synth.epochs_per_subject = 220;
    cfg.pretrain.epochs = 3;
    cfg.transfer.epochs = 2;
    cfg.protocol.variants = vec![Variant::Full, Variant::NoClass];
    let (golden, illiterate) = pair_features(&cfg);
    let (golden2, illiterate2) = pair_features(&cfg);
    let data_ok = golden == golden2 && illiterate == illiterate2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let reports: Vec<Vec<TransferReport>> = dirs
        .iter()
        .map(|d| Runner::with_dirs(None, Some(d.path().to_path_buf())).run_pair(&illiterate, &golden, &cfg).unwrap())
        .collect();
    let (a, b) = (tree_bytes(dirs[0].path()), tree_bytes(dirs[1].path()));
    let models = a.keys().filter(|k| k.contains("models")).count();
    let metrics = a.keys().filter(|k| k.contains("metrics")).count();
    let files_ok = a == b && models > 0 && metrics > 0;
    let reports_ok = reports[0] == reports[1];
    verdict(
        "determinism",
        data_ok && files_ok && reports_ok,
        &format!("data {data_ok}; {} artifact files ({models} model, {metrics} metric) identical: {files_ok}; reports identical: {reports_ok}", a.len()),
    );
}

/// Runs only when `CSSSTN_REAL_DATA` names a directory of converted stores
/// `S1`..`S10`. `CSSSTN_REAL_CONFIG` may point at an experiment config.
#[test]
fn real_data_harness() {
    let Some(dir) = std::env::var_os("CSSSTN_REAL_DATA").map(std::path::PathBuf::from) else {
        let _ = std::io::stderr().write_all(b"ACCEPTANCE SKIP  real-data harness: CSSSTN_REAL_DATA not set\n");
        return;
    };
    let base = match std::env::var_os("CSSSTN_REAL_CONFIG") {
        Some(p) => ExperimentConfig::load(Path::new(&p)).unwrap(),
        None => ExperimentConfig::default(),
    };
    let mut runner = Runner::with_dirs(Some(ArtifactCache::new(dir.join(".cache"))), None);
    let source = runner.features(&dir.join("S10"), &base.preprocess).unwrap();
    let (mut ours, mut cnn) = (Vec::new(), Vec::new());
    for k in 1..=9 {
        let target = runner.features(&dir.join(format!("S{k}")), &base.preprocess).unwrap();
        let cfg = ExperimentConfig { target: format!("S{k}"), source: "S10".into(), dataset: "tsinghua".into(), ..base.clone() };
        let r = runner.run_pair(&target, &source, &cfg).unwrap().remove(0);
        ours.push(r.mean);
        cnn.push(r.baseline_mean);
    }
    let mean = |v: &[f64]| Array1::from(v.to_vec()).mean().unwrap();
    let (m_ours, m_cnn) = (mean(&ours), mean(&cnn));
    verdict("real-data harness", m_ours > m_cnn, &format!("CSSSTN mean {m_ours:.3} vs CNN mean {m_cnn:.3} over S1-S9"));
}

#[test]
fn transfer_config_rejects_empty_objective() {
    // Guard used by every run above: the protocol never trains without a loss.
    let mut c = TransferConfig::default();
    c.losses = LossSwitches { content: false, style: false, semantic: false };
    assert!(c.validate().is_err());
}
