//! Classifier pretraining with weighted cross-entropy, and class-sensitive
//! style-transfer training of the generator.

use std::sync::Mutex;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eeg_io::{oversample_indices, stratified_folds, NON_TARGET, TARGET};
use crate::error::{invalid, shape_err, Error, Result};
use crate::evaluate::{balanced_accuracy, ConfusionCounts};
use crate::models::nn::{Grads, Mode, Params};
use crate::models::{Classifier, ClassifierConfig, Generator, GeneratorConfig, NUM_CLASSES, NUM_TAPS};
use crate::preprocess::FeatureSet;

pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_CLASS_WEIGHTS: [f64; 2] = [1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// `probs[label]` fell below the log floor.
    pub clamped: bool,
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.len() != NUM_CLASSES {
        return Err(shape_err!("expected {NUM_CLASSES} probabilities, got {}", probs.len()));
    }
    if probs.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(invalid!("{probs:?} is not a probability vector"));
    }
    Ok(())
}

/// `−ω_k · ln p_k`, with `ln` floored at `ln 1e-12`.
pub fn weighted_ce_loss(probs: &[f64], label: u8, weights: [f64; 2]) -> Result<CeLoss> {
    check_simplex(probs)?;
    let k = label as usize;
    if k >= NUM_CLASSES {
        return Err(invalid!("label {label} out of range"));
    }
    let p = probs[k];
    Ok(CeLoss {
        value: -weights[k] * p.max(LOG_FLOOR).ln(),
        clamped: p < LOG_FLOOR,
    })
}

/// Unweighted cross-entropy of the source classifier on a transferred sample.
pub fn semantic_loss(probs: &[f64], label: u8) -> Result<CeLoss> {
    weighted_ce_loss(probs, label, [1.0, 1.0])
}

/// Gradient of `−ω_k ln softmax(z)_k` with respect to the logits `z`.
pub fn ce_logit_grad(probs: &[f64; 2], label: u8, weight: f64) -> [f64; 2] {
    let mut g = [weight * probs[0], weight * probs[1]];
    g[label as usize] -= weight;
    g
}

fn log_softmax(x: &Array3<f64>) -> Array3<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.mapv(|v| v - lse)
}

/// `KL(softmax(h) ‖ softmax(template))` over the flattened arrays, and its
/// gradient with respect to `h`.
pub fn style_loss_grad(h: &Array3<f64>, template: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    if h.dim() != template.dim() {
        return Err(shape_err!("style features {:?} vs template {:?}", h.dim(), template.dim()));
    }
    let lp = log_softmax(h);
    let lq = log_softmax(template);
    let p = lp.mapv(f64::exp);
    let diff = &lp - &lq;
    let kl = (&p * &diff).sum().max(0.0);
    let grad = &p * &diff.mapv(|d| d - kl);
    Ok((kl, grad))
}

pub fn style_loss(h: &Array3<f64>, template: &Array3<f64>) -> Result<f64> {
    style_loss_grad(h, template).map(|r| r.0)
}

/// Mean squared difference and its gradient with respect to `a`.
pub fn content_loss_grad(a: &Array3<f64>, b: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    if a.dim() != b.dim() {
        return Err(shape_err!("content features {:?} vs {:?}", a.dim(), b.dim()));
    }
    let n = a.len() as f64;
    let d = a - b;
    let loss = d.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, d.mapv(|v| 2.0 * v / n)))
}

pub fn content_loss(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    content_loss_grad(a, b).map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// Average the inputs, then extract features with `C_S`.
    #[default]
    InputMean,
    /// Average the per-sample `C_S` features.
    FeatureMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplate {
    /// `None` for the pooled all-class template.
    pub class_id: Option<u8>,
    pub count: usize,
    pub input_template: Array3<f64>,
    /// One entry per classifier tap.
    pub features: Vec<Array3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub per_class: [ClassTemplate; 2],
    pub pooled: ClassTemplate,
    /// Checksum of the `C_S` parameters the features came from.
    pub source_checksum: String,
    pub mode: TemplateMode,
}

fn mean_of(set: &FeatureSet, members: &[usize]) -> Array3<f64> {
    let mut acc = Array3::<f64>::zeros((set.channels(), set.image_size(), set.image_size()));
    for &i in members {
        acc.zip_mut_with(&set.values.index_axis(ndarray::Axis(0), i), |a, &v| *a += v as f64);
    }
    acc / members.len() as f64
}

fn template_for(set: &FeatureSet, c_s: &Classifier, members: &[usize], class_id: Option<u8>, mode: TemplateMode) -> Result<ClassTemplate> {
    let input_template = mean_of(set, members);
    let features = match mode {
        TemplateMode::InputMean => c_s.forward(&input_template, &mut Mode::Eval)?.features,
        TemplateMode::FeatureMean => {
            let per: Vec<Vec<Array3<f64>>> = members
                .par_iter()
                .map(|&i| Ok(c_s.forward(&set.input(i), &mut Mode::Eval)?.features))
                .collect::<Result<_>>()?;
            (0..NUM_TAPS)
                .map(|l| {
                    let mut acc = Array3::zeros(per[0][l].dim());
                    for f in &per {
                        acc += &f[l];
                    }
                    acc / per.len() as f64
                })
                .collect()
        }
    };
    Ok(ClassTemplate { class_id, count: members.len(), input_template, features })
}

/// Per-class and pooled templates of the source subject.
pub fn compute_class_templates(source: &FeatureSet, c_s: &Classifier, mode: TemplateMode) -> Result<Templates> {
    source.validate()?;
    let members = |k: u8| (0..source.len()).filter(|&i| source.labels[i] == k).collect::<Vec<_>>();
    let (non, tgt) = (members(NON_TARGET), members(TARGET));
    if non.is_empty() || tgt.is_empty() {
        return Err(invalid!("templates need both classes (non-targets {}, targets {})", non.len(), tgt.len()));
    }
    let all: Vec<usize> = (0..source.len()).collect();
    Ok(Templates {
        per_class: [
            template_for(source, c_s, &non, Some(NON_TARGET), mode)?,
            template_for(source, c_s, &tgt, Some(TARGET), mode)?,
        ],
        pooled: template_for(source, c_s, &all, None, mode)?,
        source_checksum: c_s.net.params.checksum(),
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam(AdamConfig { lr, ..AdamConfig::default() })
    }

    fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerConfig::Adam(a) => {
                if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
                    return Err(invalid!("invalid Adam moments {a:?}"));
                }
                a.lr
            }
            OptimizerConfig::Sgd { lr } => *lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        Ok(())
    }
}

/// Optimizer state. Parameters are rounded to `f32` after every step.
pub struct Optimizer {
    config: OptimizerConfig,
    m: Grads,
    v: Grads,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        Optimizer { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads) {
        self.t += 1;
        match self.config {
            OptimizerConfig::Adam(a) => {
                let bc1 = 1.0 - a.beta1.powi(self.t);
                let bc2 = 1.0 - a.beta2.powi(self.t);
                for (b, block) in params.blocks.iter_mut().enumerate() {
                    let (m, v, g) = (&mut self.m.blocks[b], &mut self.v.blocks[b], &grads.blocks[b]);
                    for i in 0..block.values.len() {
                        m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g[i];
                        v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g[i] * g[i];
                        block.values[i] -= a.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + a.eps);
                    }
                }
            }
            OptimizerConfig::Sgd { lr } => {
                for (block, g) in params.blocks.iter_mut().zip(&grads.blocks) {
                    for (p, g) in block.values.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
        }
        params.round_to_f32();
    }
}

/// Dropout stream for one sample of one epoch, independent of batching
/// and thread scheduling.
fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Sums per-sample gradients in batch order so the result does not depend
/// on how rayon scheduled the work.
fn reduce_grads(params: &Params, parts: Vec<Grads>) -> Grads {
    let mut total = params.zeros_like();
    for g in &parts {
        total.add_assign(g);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub class_weights: [f64; 2],
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stratified hold-out share used for checkpoint selection; 0 trains on
    /// everything and keeps the last epoch.
    pub validation_fraction: f64,
    pub seed: u64,
    /// `in_channels`, `image_size` and `seed` are taken from the data and
    /// the run seed.
    pub classifier: ClassifierConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            class_weights: DEFAULT_CLASS_WEIGHTS,
            patience: 10,
            validation_fraction: 0.2,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be positive"));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid!("class weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid!("validation fraction must be in [0, 1)"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: Option<f64>,
    /// Class-weighted cross-entropy on the hold-out.
    pub val_loss: Option<f64>,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

fn validation_split(labels: &[u8], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if fraction == 0.0 {
        return Ok(((0..labels.len()).collect(), Vec::new()));
    }
    let k = (1.0 / fraction).round().max(2.0) as usize;
    let fold = stratified_folds(labels, k, seed ^ 0x5eed_0f_7a1)
        .map_err(|e| invalid!("validation hold-out failed: {e}"))?
        .swap_remove(0);
    Ok((fold.train, fold.test))
}

/// Trains a classifier by minimizing class-weighted cross-entropy and
/// returns the epoch with the best validation balanced accuracy, ties going
/// to the lower validation loss.
pub fn pretrain_classifier(features: &FeatureSet, config: &PretrainConfig) -> Result<(Classifier, PretrainMetrics)> {
    config.validate()?;
    features.validate()?;
    if features.count_class(TARGET) == 0 || features.count_class(NON_TARGET) == 0 {
        return Err(invalid!("pretraining needs both classes"));
    }
    let mut net = Classifier::new(ClassifierConfig {
        in_channels: features.channels(),
        image_size: features.image_size(),
        seed: config.seed,
        ..config.classifier.clone()
    })?;
    let (train, val) = validation_split(&features.labels, config.validation_fraction, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, &net.net.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, f64, usize, Params)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut clamped = 0;
        for (b, batch) in shuffled_batches(train.len(), config.batch_size, &mut shuffle_rng).into_iter().enumerate() {
            let parts = batch
                .par_iter()
                .map(|&pos| {
                    let i = train[pos];
                    let mut rng = sample_rng(config.seed, epoch, pos);
                    let (out, tape) = net.forward_tape(&features.input(i), &mut Mode::Train(&mut rng))?;
                    let label = features.labels[i];
                    let loss = weighted_ce_loss(&out.probs, label, config.class_weights)?;
                    let d = ce_logit_grad(&out.probs, label, config.class_weights[label as usize]);
                    let mut g = net.net.params.zeros_like();
                    net.backward(&tape, Some(d), [None, None, None], Some(&mut g))?;
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch_loss: f64 = parts.iter().map(|p| p.0.value).sum::<f64>() / batch.len() as f64;
            clamped += parts.iter().filter(|p| p.0.clamped).count();
            let mut grads = reduce_grads(&net.net.params, parts.into_iter().map(|p| p.1).collect());
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!("pretraining epoch {epoch} batch {b}: loss {batch_loss}")));
            }
            loss_sum += batch_loss * batch.len() as f64;
            opt.step(&mut net.net.params, &grads);
        }
        let val_score = if val.is_empty() { None } else { Some(score_on(&net, features, &val, config.class_weights)?) };
        history.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_balanced_accuracy: val_score.map(|s| s.0),
            val_loss: val_score.map(|s| s.1),
            clamped,
        });
        log::debug!("pretrain epoch {epoch}: loss {:.4} val {:?}", loss_sum / train.len() as f64, val_score);
        match val_score {
            Some((acc, vl)) if best.as_ref().map_or(true, |b| acc > b.0 || (acc == b.0 && vl < b.1)) => {
                best = Some((acc, vl, epoch, net.net.params.clone()));
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if config.patience > 0 && since_best >= config.patience {
                    break;
                }
            }
            None => {}
        }
    }
    let (best_epoch, best_acc) = match best {
        Some((acc, _, epoch, params)) => {
            net.net.params = params;
            (epoch, Some(acc))
        }
        None => (history.len(), None),
    };
    Ok((net, PretrainMetrics { history, best_epoch, best_val_balanced_accuracy: best_acc, train_size: train.len(), val_size: val.len() }))
}

/// Balanced accuracy and mean weighted cross-entropy.
fn score_on(net: &Classifier, features: &FeatureSet, idx: &[usize], weights: [f64; 2]) -> Result<(f64, f64)> {
    let outs = idx
        .par_iter()
        .map(|&i| {
            let out = net.forward(&features.input(i), &mut Mode::Eval)?;
            Ok((out.predicted(), weighted_ce_loss(&out.probs, features.labels[i], weights)?.value))
        })
        .collect::<Result<Vec<(u8, f64)>>>()?;
    let preds: Vec<u8> = outs.iter().map(|o| o.0).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| features.labels[i]).collect();
    let loss = outs.iter().map(|o| o.1).sum::<f64>() / idx.len() as f64;
    Ok((balanced_accuracy(&ConfusionCounts::from_predictions(&preds, &labels)?)?, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSwitches {
    pub content: bool,
    pub style: bool,
    pub semantic: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches { content: true, style: true, semantic: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { style: 1.0, content: 1.0, semantic: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub losses: LossSwitches,
    pub class_sensitive: bool,
    /// 1-based classifier blocks used by the style and content losses.
    pub feature_layers: Vec<usize>,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `channels`, `image_size` and `seed` are taken from the data and the
    /// run seed.
    pub generator: GeneratorConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            losses: LossSwitches::default(),
            class_sensitive: true,
            feature_layers: vec![1],
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::adam(2e-4),
            epochs: 100,
            batch_size: 64,
            seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.losses;
        if !(l.content || l.style || l.semantic) {
            return Err(invalid!("at least one transfer loss must be enabled"));
        }
        let w = self.weights;
        if [w.style, w.content, w.semantic].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid!("loss weights must be finite and non-negative"));
        }
        if self.feature_layers.is_empty() || self.feature_layers.iter().any(|&l| !(1..=NUM_TAPS).contains(&l)) {
            return Err(invalid!("feature layers must be a non-empty subset of 1..={NUM_TAPS}"));
        }
        let mut sorted = self.feature_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.feature_layers.len() {
            return Err(invalid!("feature layers contain duplicates"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Ablation variants; `label` gives the report column name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoCont,
    NoStyle,
    NoSem,
    NoClass,
    /// Second-layer features.
    #[serde(rename = "layer-2")]
    LayerTwo,
    /// Features of all three layers.
    AllLayers,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NoCont,
        Variant::NoStyle,
        Variant::NoSem,
        Variant::NoClass,
        Variant::LayerTwo,
        Variant::AllLayers,
        Variant::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "CSSSTN",
            Variant::NoCont => "CSSSTN w/o L_cont",
            Variant::NoStyle => "CSSSTN w/o L_style",
            Variant::NoSem => "CSSSTN w/o L_sem",
            Variant::NoClass => "CSSSTN w/o class",
            Variant::LayerTwo => "CSSSTN-A",
            Variant::AllLayers => "CSSSTN-B",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCont => "no-cont",
            Variant::NoStyle => "no-style",
            Variant::NoSem => "no-sem",
            Variant::NoClass => "no-class",
            Variant::LayerTwo => "layer-2",
            Variant::AllLayers => "all-layers",
        }
    }

    /// The full configuration with this variant's component removed.
    pub fn apply(&self, base: &TransferConfig) -> TransferConfig {
        let mut c = base.clone();
        c.losses = LossSwitches::default();
        c.class_sensitive = true;
        c.feature_layers = vec![1];
        match self {
            Variant::Full => {}
            Variant::NoCont => c.losses.content = false,
            Variant::NoStyle => c.losses.style = false,
            Variant::NoSem => c.losses.semantic = false,
            Variant::NoClass => c.class_sensitive = false,
            Variant::LayerTwo => c.feature_layers = vec![2],
            Variant::AllLayers => c.feature_layers = vec![1, 2, 3],
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?}; expected one of {}", Variant::ALL.map(|v| v.slug()).join(", ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub style: f64,
    pub cont: f64,
    pub sem: f64,
    /// Weighted sum of the enabled terms.
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.style += o.style;
        self.cont += o.cont;
        self.sem += o.sem;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.style *= s;
        self.cont *= s;
        self.sem *= s;
        self.total *= s;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateId {
    Class(u8),
    Pooled,
}

/// Observes which style template each training sample was matched to.
pub trait TemplateRecorder: Sync {
    fn record(&self, sample: usize, label: u8, template: TemplateId);
}

#[derive(Debug, Default)]
pub struct VecRecorder(pub Mutex<Vec<(usize, u8, TemplateId)>>);

impl TemplateRecorder for VecRecorder {
    fn record(&self, sample: usize, label: u8, template: TemplateId) {
        self.0.lock().expect("recorder lock").push((sample, label, template));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEpoch {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferHistory {
    /// Eval-mode mean over the balanced training set before any update.
    pub initial: LossBreakdown,
    /// Training-mode means per epoch.
    pub epochs: Vec<TransferEpoch>,
    /// Eval-mode mean after the last update.
    pub final_: LossBreakdown,
    pub train_size: usize,
    pub classifier_checksums: [String; 2],
}

/// Loss of one target sample and, optionally, the generator gradient.
struct TransferSample<'a> {
    c_t_features: &'a [Array3<f64>],
    x: Array3<f64>,
    label: u8,
}

struct Transfer<'a> {
    c_s: &'a Classifier,
    templates: &'a Templates,
    config: &'a TransferConfig,
}

impl Transfer<'_> {
    fn template(&self, label: u8) -> (TemplateId, &ClassTemplate) {
        if self.config.class_sensitive {
            (TemplateId::Class(label), &self.templates.per_class[label as usize])
        } else {
            (TemplateId::Pooled, &self.templates.pooled)
        }
    }

    fn sample(&self, g: &Generator, s: &TransferSample, mode: &mut Mode, grads: Option<&mut Grads>) -> Result<(LossBreakdown, TemplateId)> {
        let cfg = self.config;
        let (template_id, template) = self.template(s.label);
        let (x_prime, g_tape) = g.forward_tape(&s.x, mode)?;
        let (out, c_tape) = self.c_s.forward_tape(&x_prime, &mut Mode::Eval)?;
        let mut loss = LossBreakdown::default();
        let mut d_feat: [Option<Array3<f64>>; NUM_TAPS] = Default::default();
        for &layer in &cfg.feature_layers {
            let l = layer - 1;
            let (st, dst) = style_loss_grad(&out.features[l], &template.features[l])?;
            let (ct, dct) = content_loss_grad(&out.features[l], &s.c_t_features[l])?;
            loss.style += st;
            loss.cont += ct;
            let mut d = Array3::zeros(out.features[l].dim());
            if cfg.losses.style {
                d.scaled_add(cfg.weights.style, &dst);
            }
            if cfg.losses.content {
                d.scaled_add(cfg.weights.content, &dct);
            }
            d_feat[l] = Some(d);
        }
        loss.sem = semantic_loss(&out.probs, s.label)?.value;
        let on = |flag: bool, w: f64, v: f64| if flag { w * v } else { 0.0 };
        loss.total = on(cfg.losses.style, cfg.weights.style, loss.style)
            + on(cfg.losses.content, cfg.weights.content, loss.cont)
            + on(cfg.losses.semantic, cfg.weights.semantic, loss.sem);
        if let Some(grads) = grads {
            let d_logits = cfg.losses.semantic.then(|| ce_logit_grad(&out.probs, s.label, cfg.weights.semantic));
            let dx = self.c_s.backward(&c_tape, d_logits, d_feat, None)?;
            g.backward(&g_tape, &dx, Some(grads))?;
        }
        Ok((loss, template_id))
    }

    fn mean_loss(&self, g: &Generator, samples: &[TransferSample]) -> Result<LossBreakdown> {
        let parts = samples
            .par_iter()
            .map(|s| self.sample(g, s, &mut Mode::Eval, None).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = LossBreakdown::default();
        for p in &parts {
            acc.add(p);
        }
        Ok(acc.scaled(1.0 / samples.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub generator: Generator,
    pub history: TransferHistory,
}

/// Trains `G` so that `C_S` sees transferred target samples as its own
/// class-matched data. Both classifiers stay frozen; the target set is
/// oversampled to balance internally.
pub fn train_generator(
    target: &FeatureSet,
    c_t: &Classifier,
    c_s: &Classifier,
    templates: &Templates,
    config: &TransferConfig,
    recorder: Option<&dyn TemplateRecorder>,
) -> Result<TransferOutcome> {
    config.validate()?;
    target.validate()?;
    if templates.source_checksum != c_s.net.params.checksum() {
        return Err(invalid!("templates were computed with a different source classifier"));
    }
    let checksums = [c_t.net.params.checksum(), c_s.net.params.checksum()];
    let mut g = Generator::new(GeneratorConfig {
        channels: target.channels(),
        image_size: target.image_size(),
        seed: config.seed,
        ..config.generator.clone()
    })?;
    let picks = oversample_indices(&target.labels, config.seed)?;
    let c_t_features: Vec<Vec<Array3<f64>>> = picks
        .par_iter()
        .map(|&i| Ok(c_t.forward(&target.input(i), &mut Mode::Eval)?.features))
        .collect::<Result<_>>()?;
    let samples: Vec<TransferSample> = picks
        .iter()
        .zip(&c_t_features)
        .map(|(&i, f)| TransferSample { c_t_features: f, x: target.input(i), label: target.labels[i] })
        .collect();
    let transfer = Transfer { c_s, templates, config };
    let initial = transfer.mean_loss(&g, &samples)?;
    let mut opt = Optimizer::new(config.optimizer, &g.net.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in shuffled_batches(samples.len(), config.batch_size, &mut shuffle_rng).into_iter().enumerate() {
            let parts = batch
                .par_iter()
                .map(|&pos| {
                    let mut rng = sample_rng(config.seed, epoch, pos);
                    let mut grads = g.net.params.zeros_like();
                    let (loss, tid) = transfer.sample(&g, &samples[pos], &mut Mode::Train(&mut rng), Some(&mut grads))?;
                    Ok((pos, loss, tid, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch_loss = LossBreakdown::default();
            for (pos, loss, tid, _) in &parts {
                batch_loss.add(loss);
                if let Some(r) = recorder {
                    r.record(picks[*pos], samples[*pos].label, *tid);
                }
            }
            let mut grads = reduce_grads(&g.net.params, parts.into_iter().map(|p| p.3).collect());
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!("transfer epoch {epoch} batch {b}: loss {}", batch_loss.total / batch.len() as f64)));
            }
            epoch_loss.add(&batch_loss);
            opt.step(&mut g.net.params, &grads);
        }
        let loss = epoch_loss.scaled(1.0 / samples.len() as f64);
        log::debug!("transfer epoch {epoch}: {loss:?}");
        epochs.push(TransferEpoch { epoch, loss });
    }
    let final_ = transfer.mean_loss(&g, &samples)?;
    if [c_t.net.params.checksum(), c_s.net.params.checksum()] != checksums {
        return Err(invalid!("a frozen classifier changed during transfer"));
    }
    Ok(TransferOutcome {
        generator: g,
        history: TransferHistory { initial, epochs, final_, train_size: samples.len(), classifier_checksums: checksums },
    })
}

/// Loss and generator gradient over a fixed sample list, in eval mode.
/// Exposed for gradient verification.
pub fn transfer_objective(
    g: &Generator,
    targets: &[(Array3<f64>, u8)],
    c_t: &Classifier,
    c_s: &Classifier,
    templates: &Templates,
    config: &TransferConfig,
) -> Result<(LossBreakdown, Grads)> {
    let feats: Vec<Vec<Array3<f64>>> = targets.iter().map(|(x, _)| Ok(c_t.forward(x, &mut Mode::Eval)?.features)).collect::<Result<_>>()?;
    let transfer = Transfer { c_s, templates, config };
    let mut grads = g.net.params.zeros_like();
    let mut total = LossBreakdown::default();
    for ((x, label), f) in targets.iter().zip(&feats) {
        let s = TransferSample { c_t_features: f, x: x.clone(), label: *label };
        let (loss, _) = transfer.sample(g, &s, &mut Mode::Eval, Some(&mut grads))?;
        total.add(&loss);
    }
    let n = targets.len() as f64;
    grads.scale(1.0 / n);
    Ok((total.scaled(1.0 / n), grads))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}
