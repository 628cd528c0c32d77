//! Subcommand runner. Every invocation writes `manifest.json` into its
//! output directory before starting and again when it finishes.

pub mod config;
pub mod manifest;
pub mod runner;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

pub use config::{canonical_hash, ExperimentConfig, ProtocolConfig};
pub use manifest::{DirLock, RunManifest, RunStatus, MANIFEST_FILE};
pub use runner::{feature_checksum, ArtifactCache, Runner, StageError, StageExt, StageResult};

use crate::eeg_io::{save_epoch_store, stratified_folds, Fold, SplitMode};
use crate::error::{invalid, Error};
use crate::evaluate::{classifier_accuracy, evaluate_fold, pca_2d, report_tables, select_golden_subject, AccuracyTable, Identity, TransferReport, BASELINE_COLUMN};
use crate::models::nn::Mode;
use crate::models::{Classifier, Generator};
use crate::preprocess::{filter_taps, save_feature_store};
use crate::synthdata::{generate_subject, SynthSpec};
use crate::training::{PretrainConfig, Variant};
use runner::{read_json, subject_store, write_json};

pub const CACHE_ENV: &str = "CSSSTN_CACHE_DIR";
pub const THREADS_ENV: &str = "CSSSTN_THREADS";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Parser)]
#[command(name = "cssstn", version, about = "Cross-subject semantic style transfer for RSVP-EEG target detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply to missing sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives the run manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Directory with one store per subject.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub source: Option<String>,
    /// Share of each training fold the target contributes.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// earliest, latest or random.
    #[arg(long)]
    pub mode: Option<SplitMode>,
    /// Sets every seed of the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic subjects as epoch stores.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Turn an epoch store into a feature store.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier on one subject.
    Pretrain {
        /// Epoch or feature store.
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pick the source subject from an accuracy table or by cross-validating
    /// a CNN on every subject.
    SelectGolden {
        #[arg(long, conflicts_with = "data")]
        table: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated ids; default is every store in `--data`.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Full transfer protocol for one pair.
    Transfer {
        #[command(flatten)]
        pair: PairArgs,
        /// Variant slug; defaults to the config's variant list.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Transfer with components removed; `all` runs every variant.
    Ablate {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score saved models on a whole target store.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        target_classifier: PathBuf,
        #[arg(long)]
        source_classifier: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Collect report files into summary tables.
    Report {
        #[arg(long)]
        reports: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export a 2-D principal projection of inputs, transferred inputs or
    /// classifier features.
    Embed {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, requires = "layer")]
        classifier: Option<PathBuf>,
        /// 1-based classifier block.
        #[arg(long)]
        layer: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Preprocess, pretrain, transfer, evaluate and report from one config.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Pretrain { .. } => "pretrain",
            Command::SelectGolden { .. } => "select-golden",
            Command::Transfer { .. } => "transfer",
            Command::Ablate { .. } => "ablate",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::Embed { .. } => "embed",
            Command::Run { .. } => "run",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Preprocess { common, .. }
            | Command::Pretrain { common, .. }
            | Command::SelectGolden { common, .. }
            | Command::Transfer { common, .. }
            | Command::Ablate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common, .. }
            | Command::Embed { common, .. }
            | Command::Run { common, .. } => common,
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Store(_) => "store",
        Error::Invalid(_) => "invalid",
        Error::Shape(_) => "shape",
        Error::Diverged(_) => "diverged",
        Error::Leakage(_) => "leakage",
        Error::Json(_) => "json",
    }
}

/// One JSON object on one line.
pub fn error_line(e: &StageError) -> String {
    serde_json::json!({
        "error": error_kind(&e.error),
        "stage": e.stage,
        "message": e.error.to_string(),
    })
    .to_string()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails harmlessly when a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run_command(&cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> StageResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).stage("config"),
        None => Ok(ExperimentConfig::default()),
    }
}

fn cache_for(out: &Path) -> ArtifactCache {
    match std::env::var_os(CACHE_ENV) {
        Some(root) if !root.is_empty() => ArtifactCache::new(PathBuf::from(root)),
        _ => ArtifactCache::new(out.join("cache")),
    }
}

fn config_seeds(c: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("run".to_string(), c.seed),
        ("synth".to_string(), c.synth.mixing_seed),
        ("pretrain".to_string(), c.pretrain.seed),
        ("transfer".to_string(), c.transfer.seed),
        ("budget".to_string(), c.protocol.budget.seed),
    ])
}

/// Locks `out`, writes the opening manifest, runs `body` and finalizes the
/// manifest with the outcome.
fn with_manifest(
    name: &str,
    args: Vec<String>,
    out: &Path,
    config: &ExperimentConfig,
    body: impl FnOnce(&mut RunManifest, &mut Runner) -> StageResult<()>,
) -> StageResult<()> {
    let _lock = DirLock::acquire(out).stage("setup")?;
    let config_json = serde_json::to_value(config).map_err(Error::from).stage("setup")?;
    let mut manifest = RunManifest::new(name, args, config_json, config.hash());
    manifest.seeds = config_seeds(config);
    manifest.write(out).stage("setup")?;
    let mut runner = Runner::with_dirs(Some(cache_for(out)), Some(out.to_path_buf()));
    let result = body(&mut manifest, &mut runner);
    let log = std::mem::take(&mut runner.log);
    manifest.cache_hits.extend(log.cache_hits);
    for (k, v) in log.timings_s {
        *manifest.timings_s.entry(k).or_default() += v;
    }
    manifest.inputs.extend(log.inputs);
    manifest.outputs.extend(log.outputs);
    manifest.outputs.sort();
    manifest.outputs.dedup();
    manifest.finish(match &result {
        Ok(()) => RunStatus::Complete,
        Err(e) => RunStatus::Failed { stage: e.stage.clone(), message: e.error.to_string() },
    });
    manifest.write(out).stage("setup")?;
    result
}

fn apply_pair(config: &mut ExperimentConfig, pair: &PairArgs) -> StageResult<()> {
    if let Some(s) = pair.seed {
        *config = config.clone().with_seed(s);
    }
    if let Some(t) = &pair.target {
        config.target = t.clone();
    }
    if let Some(s) = &pair.source {
        config.source = s.clone();
    }
    if pair.fraction.is_some() || pair.mode.is_some() {
        let fraction = pair.fraction.unwrap_or(config.protocol.budget.fraction);
        let mode = pair.mode.unwrap_or(SplitMode::Earliest);
        config.set_budget(fraction, mode);
    }
    config.data_dir = Some(pair.data.clone());
    config.validate().stage("config")
}

fn parse_variants(spec: &str) -> StageResult<Vec<Variant>> {
    if spec == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse::<Variant>()).collect::<crate::Result<_>>().stage("config")
}

/// Runs the pair protocol and writes one report per variant plus the
/// summary tables. Returns the report paths.
fn transfer_pair(runner: &mut Runner, config: &ExperimentConfig, data_dir: &Path, out: &Path) -> StageResult<Vec<PathBuf>> {
    let target_store = subject_store(data_dir, &config.target).stage("load")?;
    let source_store = subject_store(data_dir, &config.source).stage("load")?;
    let target = runner.features(&target_store, &config.preprocess)?;
    let source = runner.features(&source_store, &config.preprocess)?;
    let reports = runner.run_pair(&target, &source, config)?;
    let dir = out.join(REPORTS_DIR);
    let mut paths = Vec::new();
    for r in &reports {
        paths.push(r.save(&dir).stage("report")?);
    }
    let files = report_tables(&reports, out).stage("report")?;
    runner.log.outputs.extend(paths.iter().cloned());
    runner.log.outputs.extend([files.csv, files.json]);
    Ok(paths)
}

/// preprocess → pretrain → templates → transfer → evaluate → report for the
/// pair named in the config. Without a data directory the synthetic cohort
/// is generated first. Returns the report files.
pub fn end_to_end(config_file: &Path, out: &Path) -> StageResult<Vec<PathBuf>> {
    let config = load_config(Some(config_file))?;
    end_to_end_with(&config, out, vec!["run".into(), "--config".into(), config_file.display().to_string()])
}

pub fn end_to_end_with(config: &ExperimentConfig, out: &Path, args: Vec<String>) -> StageResult<Vec<PathBuf>> {
    config.validate().stage("config")?;
    let mut paths = Vec::new();
    with_manifest("run", args, out, config, |manifest, runner| {
        let data_dir = match &config.data_dir {
            Some(d) => d.clone(),
            None => {
                let d = out.join("data");
                manifest.time("synth", |_| write_synth(&config.synth, config.synth.mixing_seed, &d))?;
                d
            }
        };
        paths = transfer_pair(runner, config, &data_dir, out)?;
        Ok(())
    })?;
    Ok(paths)
}

fn write_synth(spec: &SynthSpec, seed: u64, out: &Path) -> StageResult<Vec<PathBuf>> {
    spec.validate().stage("synth")?;
    (0..spec.n_subjects)
        .map(|i| {
            let set = generate_subject(spec, i, seed).stage("synth")?;
            let p = out.join(SynthSpec::subject_id(i));
            save_epoch_store(&set, &p).stage("synth")?;
            Ok(p)
        })
        .collect()
}

/// Subjects with a store directly under `dir`, sorted.
fn list_subjects(dir: &Path) -> StageResult<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e)).stage("load")? {
        let entry = entry.map_err(|e| Error::io(dir, e)).stage("load")?;
        if entry.path().join(crate::eeg_io::META_FILE).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Mean fold balanced accuracy of a CNN trained on each subject alone.
pub fn cnn_accuracy_table(runner: &mut Runner, data_dir: &Path, subjects: &[String], config: &ExperimentConfig) -> StageResult<AccuracyTable> {
    let mut values = Vec::new();
    for id in subjects {
        let store = subject_store(data_dir, id).stage("load")?;
        let set = runner.features(&store, &config.preprocess)?;
        let folds = stratified_folds(&set.labels, config.protocol.folds, config.seed).stage("split")?;
        let n = config.protocol.max_folds.map_or(folds.len(), |m| m.min(folds.len()));
        let mut accs = Vec::new();
        for (k, fold) in folds.iter().take(n).enumerate() {
            let cfg = PretrainConfig { seed: config.pretrain.seed.wrapping_add(1 + k as u64), ..config.pretrain.clone() };
            let (c, _) = runner.pretrain(&set.select(&fold.train), &cfg, &format!("{id}-fold{k}"))?;
            accs.push(classifier_accuracy(&c, &set, &fold.test).stage("evaluate")?);
        }
        values.push(vec![crate::evaluate::mean_std(&accs).0]);
    }
    Ok(AccuracyTable { subjects: subjects.to_vec(), classifiers: vec![BASELINE_COLUMN.to_string()], values })
}

fn embed_rows(
    set: &crate::preprocess::FeatureSet,
    g: Option<&Generator>,
    c: Option<(&Classifier, usize)>,
) -> crate::Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let mut x = set.input(i);
        if let Some(g) = g {
            x = g.forward(&x, &mut Mode::Eval)?;
        }
        if let Some((c, layer)) = c {
            x = c.forward(&x, &mut Mode::Eval)?.features.swap_remove(layer - 1);
        }
        rows.push(x.iter().copied().collect());
    }
    let w = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), w), rows.concat()).map_err(|e| invalid!("embedding rows: {e}"))
}

fn run_command(cmd: &Command, args: Vec<String>) -> StageResult<()> {
    let common = cmd.common();
    let out = common.out.as_path();
    let mut config = load_config(common.config.as_deref())?;
    match cmd {
        Command::Synth { subjects, seed, .. } => {
            if let Some(n) = subjects {
                config.synth.n_subjects = *n;
            }
            if let Some(s) = seed {
                config = config.with_seed(*s);
            }
            config.validate().stage("config")?;
            with_manifest(cmd.name(), args, out, &config, |m, _| {
                let paths = m.time("synth", |_| write_synth(&config.synth, config.synth.mixing_seed, out))?;
                m.outputs.extend(paths);
                Ok(())
            })
        }
        Command::Preprocess { input, .. } => with_manifest(cmd.name(), args, out, &config, |m, runner| {
            let set = runner.features(input, &config.preprocess)?;
            save_feature_store(&set, out).stage("preprocess")?;
            let meta = crate::eeg_io::read_store_meta(input).stage("load")?;
            if let Some(rate) = meta.sampling_rate {
                let taps = filter_taps(&config.preprocess, rate).stage("preprocess")?;
                m.details.insert("filter_taps".into(), serde_json::json!(taps));
            }
            m.outputs.push(out.to_path_buf());
            Ok(())
        }),
        Command::Pretrain { features, .. } => with_manifest(cmd.name(), args, out, &config, |m, runner| {
            let set = runner.features(features, &config.preprocess)?;
            let (c, metrics) = runner.pretrain(&set, &config.pretrain, &set.subject_id)?;
            m.details.insert("param_count".into(), serde_json::json!(c.param_count()));
            m.details.insert("best_epoch".into(), serde_json::json!(metrics.best_epoch));
            Ok(())
        }),
        Command::SelectGolden { table, data, subjects, .. } => with_manifest(cmd.name(), args, out, &config, |m, runner| {
            let table = match (table, data) {
                (Some(t), _) => {
                    let t: AccuracyTable = read_json(t).stage("load")?;
                    m.inputs.insert(t.subjects.join(","), String::new());
                    t
                }
                (None, Some(d)) => {
                    let ids = if subjects.is_empty() { list_subjects(d)? } else { subjects.clone() };
                    cnn_accuracy_table(runner, d, &ids, &config)?
                }
                (None, None) => return Err(invalid!("pass --table or --data")).stage("config"),
            };
            let golden = select_golden_subject(&table).stage("select")?;
            let path = out.join("golden.json");
            write_json(&path, &serde_json::json!({ "golden": golden, "table": table })).stage("select")?;
            m.outputs.push(path);
            println!("{golden}");
            Ok(())
        }),
        Command::Transfer { pair, variant, .. } => {
            apply_pair(&mut config, pair)?;
            if let Some(v) = variant {
                config.protocol.variants = parse_variants(v)?;
            }
            with_manifest(cmd.name(), args, out, &config, |_, runner| transfer_pair(runner, &config, &pair.data, out).map(|_| ()))
        }
        Command::Ablate { pair, variant, .. } => {
            apply_pair(&mut config, pair)?;
            config.protocol.variants = parse_variants(variant)?;
            with_manifest(cmd.name(), args, out, &config, |_, runner| transfer_pair(runner, &config, &pair.data, out).map(|_| ()))
        }
        Command::Evaluate { data, target, generator, target_classifier, source_classifier, .. } => {
            with_manifest(cmd.name(), args, out, &config, |m, runner| {
                let store = subject_store(data, target).stage("load")?;
                let set = runner.features(&store, &config.preprocess)?;
                let c_t = Classifier::load(target_classifier).stage("load")?;
                let c_s = Classifier::load(source_classifier).stage("load")?;
                let fold = Fold { train: Vec::new(), test: (0..set.len()).collect() };
                let ev = match generator {
                    Some(g) => {
                        let g = Generator::load(g).stage("load")?;
                        evaluate_fold(0, &g, &c_t, &c_s, &set, &fold)
                    }
                    None => evaluate_fold(0, &Identity, &c_t, &c_s, &set, &fold),
                }
                .stage("evaluate")?;
                let path = out.join("evaluation.json");
                write_json(&path, &ev).stage("evaluate")?;
                m.outputs.push(path);
                Ok(())
            })
        }
        Command::Report { reports, .. } => with_manifest(cmd.name(), args, out, &config, |m, _| {
            let mut found = Vec::new();
            let mut entries: Vec<PathBuf> = fs::read_dir(reports)
                .map_err(|e| Error::io(reports, e))
                .stage("load")?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            for p in entries {
                // Manifests and summaries share the directory; only reports parse.
                if let Ok(r) = read_json::<TransferReport>(&p) {
                    m.inputs.insert(p.display().to_string(), canonical_hash(&r, &[]));
                    found.push(r);
                }
            }
            if found.is_empty() {
                return Err(invalid!("no report files in {}", reports.display())).stage("load");
            }
            let files = report_tables(&found, out).stage("report")?;
            m.outputs.extend([files.csv, files.json]);
            Ok(())
        }),
        Command::Embed { store, generator, classifier, layer, .. } => with_manifest(cmd.name(), args, out, &config, |m, runner| {
            let set = runner.features(store, &config.preprocess)?;
            let g = generator.as_ref().map(|p| Generator::load(p)).transpose().stage("load")?;
            let c = classifier.as_ref().map(|p| Classifier::load(p)).transpose().stage("load")?;
            let layer = layer.unwrap_or(1);
            if c.is_some() && !(1..=crate::models::NUM_TAPS).contains(&layer) {
                return Err(invalid!("layer must be in 1..={}", crate::models::NUM_TAPS)).stage("config");
            }
            let rows = embed_rows(&set, g.as_ref(), c.as_ref().map(|c| (c, layer))).stage("embed")?;
            let proj = pca_2d(&rows).stage("embed")?;
            let mut csv = String::from("index,label,pc1,pc2\n");
            for (i, p) in proj.outer_iter().enumerate() {
                csv.push_str(&format!("{i},{},{},{}\n", set.labels[i], p[0], p[1]));
            }
            let path = out.join("embedding.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e)).stage("embed")?;
            m.outputs.push(path);
            Ok(())
        }),
        Command::Run { seed, .. } => {
            if common.config.is_none() {
                return Err(invalid!("run needs --config")).stage("config");
            }
            if let Some(s) = seed {
                config = config.with_seed(*s);
            }
            end_to_end_with(&config, out, args).map(|_| ())
        }
    }
}
