use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{canonical_hash, ExperimentConfig};
use crate::eeg_io::{self, load_epoch_store, read_store_meta, store_checksum, stratified_folds, subset_indices, Fold, StoreKind};
use crate::error::{invalid, Error, Result};
use crate::evaluate::{evaluate_fold, FoldEvaluation, TransferReport};
use crate::models::{Classifier, Generator};
use crate::preprocess::{load_feature_store, preprocess_pipeline, save_feature_store, FeatureSet, PipelineInput, PreprocessConfig};
use crate::training::{
    compute_class_templates, pretrain_classifier, to_jsonl, train_generator, PretrainConfig, PretrainMetrics, Templates,
    TransferConfig, TransferHistory,
};

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub trait StageExt<T> {
    fn stage(self, name: &str) -> std::result::Result<T, StageError>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, name: &str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage: name.to_string(), error })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Content hash of an in-memory feature set.
pub fn feature_checksum(set: &FeatureSet) -> String {
    let mut h = Sha256::new();
    h.update(set.subject_id.as_bytes());
    for d in set.values.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in set.values.iter() {
        h.update(v.to_le_bytes());
    }
    h.update(&set.labels);
    for o in &set.acquisition_order {
        h.update((*o as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Directory of finished artifacts keyed by content hash. Entries are
/// written to a scratch directory and renamed into place, so a present
/// entry is always complete.
#[derive(Debug, Clone)]
pub struct ArtifactCache {
    root: PathBuf,
}

impl ArtifactCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(key)
    }

    pub fn lookup(&self, kind: &str, key: &str) -> Option<PathBuf> {
        let p = self.entry(kind, key);
        p.is_dir().then_some(p)
    }

    pub fn store(&self, kind: &str, key: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dst = self.entry(kind, key);
        let tmp = self.root.join(kind).join(format!(".{key}.{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write(&tmp)?;
        if dst.exists() {
            // Another process finished the same entry first.
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        } else {
            fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(dst)
    }
}

/// What a run touched, for the manifest.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub cache_hits: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

/// Executes pipeline stages, reusing cached artifacts when a cache is set
/// and writing per-epoch metrics and checkpoints when `artifacts` is set.
#[derive(Debug, Clone, Default)]
pub struct Runner {
    pub cache: Option<ArtifactCache>,
    pub artifacts: Option<PathBuf>,
    pub log: RunLog,
}

impl Runner {
    /// No cache, no files.
    pub fn in_memory() -> Self {
        Runner::default()
    }

    pub fn with_dirs(cache: Option<ArtifactCache>, artifacts: Option<PathBuf>) -> Self {
        Runner { cache, artifacts, log: RunLog::default() }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let t = Instant::now();
        let out = f(self);
        *self.log.timings_s.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    fn write_artifact(&mut self, rel: &str, contents: &str) -> Result<()> {
        let Some(dir) = &self.artifacts else { return Ok(()) };
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.log.outputs.push(path);
        Ok(())
    }

    fn save_model(&mut self, rel: &str, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let Some(dir) = &self.artifacts else { return Ok(()) };
        let path = dir.join(rel);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        save(&path)?;
        self.log.outputs.push(path);
        Ok(())
    }

    /// Loads a subject store. Epoch stores go through the feature pipeline;
    /// feature stores are used as they are.
    pub fn features(&mut self, store: &Path, config: &PreprocessConfig) -> StageResult<FeatureSet> {
        let meta = read_store_meta(store).stage("load")?;
        let checksum = store_checksum(store).stage("load")?;
        self.log.inputs.insert(store.display().to_string(), checksum.clone());
        match meta.kind {
            StoreKind::Tfr => load_feature_store(store).stage("load"),
            StoreKind::Epochs => self.timed("preprocess", |r| {
                let key = canonical_hash(config, &[&checksum]);
                if let Some(hit) = r.cache.as_ref().and_then(|c| c.lookup("features", &key)) {
                    r.log.cache_hits.push(format!("features/{key}"));
                    return load_feature_store(&hit).stage("preprocess");
                }
                let epochs = load_epoch_store(store).stage("load")?;
                let set = preprocess_pipeline(&PipelineInput::Epochs(epochs), config).stage("preprocess")?;
                if let Some(cache) = &r.cache {
                    cache.store("features", &key, |dir| save_feature_store(&set, dir)).stage("preprocess")?;
                }
                Ok(set)
            }),
        }
    }

    /// `tag` names the metrics and checkpoint files.
    pub fn pretrain(&mut self, data: &FeatureSet, config: &PretrainConfig, tag: &str) -> StageResult<(Classifier, PretrainMetrics)> {
        self.timed("pretrain", |r| {
            let key = canonical_hash(config, &[&feature_checksum(data)]);
            let cached = match r.cache.as_ref().and_then(|c| c.lookup("classifier", &key)) {
                Some(hit) => {
                    r.log.cache_hits.push(format!("classifier/{key}"));
                    let c = Classifier::load(&hit).stage("pretrain")?;
                    let m = read_json::<PretrainMetrics>(&hit.join("metrics.json")).stage("pretrain")?;
                    Some((c, m))
                }
                None => None,
            };
            let (c, m) = match cached {
                Some(cm) => cm,
                None => {
                    let (c, m) = pretrain_classifier(data, config).stage("pretrain")?;
                    if let Some(cache) = &r.cache {
                        cache
                            .store("classifier", &key, |dir| {
                                c.save(dir)?;
                                write_json(&dir.join("metrics.json"), &m)
                            })
                            .stage("pretrain")?;
                    }
                    (c, m)
                }
            };
            r.write_artifact(&format!("metrics/pretrain-{tag}.jsonl"), &to_jsonl(&m.history).stage("pretrain")?)
                .stage("pretrain")?;
            r.save_model(&format!("models/classifier-{tag}"), |d| c.save(d)).stage("pretrain")?;
            Ok((c, m))
        })
    }

    /// `inputs` must identify the templates' origin (source data and mode).
    #[allow(clippy::too_many_arguments)]
    pub fn transfer(
        &mut self,
        train: &FeatureSet,
        c_t: &Classifier,
        c_s: &Classifier,
        templates: &Templates,
        template_origin: &str,
        config: &TransferConfig,
        tag: &str,
    ) -> StageResult<(Generator, TransferHistory)> {
        self.timed("transfer", |r| {
            let ct_sum = c_t.net.params.checksum();
            let cs_sum = c_s.net.params.checksum();
            let key = canonical_hash(config, &[&feature_checksum(train), &ct_sum, &cs_sum, template_origin]);
            let cached = match r.cache.as_ref().and_then(|c| c.lookup("generator", &key)) {
                Some(hit) => {
                    r.log.cache_hits.push(format!("generator/{key}"));
                    let g = Generator::load(&hit).stage("transfer")?;
                    let h = read_json::<TransferHistory>(&hit.join("history.json")).stage("transfer")?;
                    Some((g, h))
                }
                None => None,
            };
            let (g, h) = match cached {
                Some(gh) => gh,
                None => {
                    let out = train_generator(train, c_t, c_s, templates, config, None).stage("transfer")?;
                    if let Some(cache) = &r.cache {
                        cache
                            .store("generator", &key, |dir| {
                                out.generator.save(dir)?;
                                write_json(&dir.join("history.json"), &out.history)
                            })
                            .stage("transfer")?;
                    }
                    (out.generator, out.history)
                }
            };
            r.write_artifact(&format!("metrics/transfer-{tag}.jsonl"), &to_jsonl(&h.epochs).stage("transfer")?)
                .stage("transfer")?;
            r.save_model(&format!("models/generator-{tag}"), |d| g.save(d)).stage("transfer")?;
            Ok((g, h))
        })
    }

    /// Full protocol for one target/source pair: `C_S` once, then per fold a
    /// budgeted `C_T`, one generator per variant and the soft-vote scores.
    /// Returns one report per variant, in config order.
    pub fn run_pair(&mut self, target: &FeatureSet, source: &FeatureSet, config: &ExperimentConfig) -> StageResult<Vec<TransferReport>> {
        config.validate().stage("config")?;
        if target.channels() != source.channels() || target.image_size() != source.image_size() {
            return Err(invalid!(
                "target features {}×{} do not match source {}×{}",
                target.channels(),
                target.image_size(),
                source.channels(),
                source.image_size()
            ))
            .stage("load");
        }
        let protocol = &config.protocol;
        let (c_s, _) = self.pretrain(source, &config.pretrain, "source")?;
        let templates = self.timed("templates", |_| compute_class_templates(source, &c_s, protocol.template_mode)).stage("templates")?;
        let template_origin = format!("{}:{:?}", feature_checksum(source), protocol.template_mode);

        let folds = stratified_folds(&target.labels, protocol.folds, config.seed).stage("split")?;
        let n_folds = protocol.max_folds.map_or(folds.len(), |m| m.min(folds.len()));
        let mut evals: Vec<Vec<FoldEvaluation>> = vec![Vec::new(); protocol.variants.len()];
        for (k, fold) in folds.iter().take(n_folds).enumerate() {
            let orders: Vec<usize> = fold.train.iter().map(|&i| target.acquisition_order[i]).collect();
            let picked = subset_indices(&orders, &protocol.budget).stage("split")?;
            let train_idx: Vec<usize> = picked.iter().map(|&p| fold.train[p]).collect();
            let train = target.select(&train_idx);
            let eval_fold = Fold { train: train_idx, test: fold.test.clone() };

            let ct_config = PretrainConfig { seed: config.pretrain.seed.wrapping_add(1 + k as u64), ..config.pretrain.clone() };
            let (c_t, _) = self.pretrain(&train, &ct_config, &format!("target-fold{k}"))?;
            for (v, out) in protocol.variants.iter().zip(evals.iter_mut()) {
                let tcfg = TransferConfig { seed: config.transfer.seed.wrapping_add(k as u64), ..v.apply(&config.transfer) };
                let tag = format!("{}-fold{k}", v.slug());
                let (g, _) = self.transfer(&train, &c_t, &c_s, &templates, &template_origin, &tcfg, &tag)?;
                let ev = self.timed("evaluate", |_| evaluate_fold(k, &g, &c_t, &c_s, target, &eval_fold)).stage("evaluate")?;
                log::info!(
                    "{} fold {k}: ensemble {:.3} baseline {:.3} source path {:.3}",
                    v.label(),
                    ev.ensemble_bacc,
                    ev.baseline_bacc,
                    ev.source_bacc
                );
                out.push(ev);
            }
        }

        let config_json = serde_json::to_value(config).map_err(Error::from).stage("report")?;
        protocol
            .variants
            .iter()
            .zip(evals)
            .map(|(v, folds)| {
                TransferReport::from_folds(
                    &config.dataset,
                    &target.subject_id,
                    &source.subject_id,
                    v.label(),
                    config.seed,
                    folds,
                    config_json.clone(),
                )
                .stage("report")
            })
            .collect()
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

/// Store of subject `id` under `data_dir`.
pub fn subject_store(data_dir: &Path, id: &str) -> Result<PathBuf> {
    let p = data_dir.join(id);
    if !p.join(eeg_io::META_FILE).is_file() {
        return Err(invalid!("no store for subject {id} in {}", data_dir.display()));
    }
    Ok(p)
}
