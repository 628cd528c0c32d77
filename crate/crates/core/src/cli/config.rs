use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eeg_io::{SplitMode, SplitSpec};
use crate::error::{invalid, Error, Result};
use crate::preprocess::PreprocessConfig;
use crate::synthdata::SynthSpec;
use crate::training::{PretrainConfig, TemplateMode, TransferConfig, Variant};

/// Fold layout, data budget and variants of a transfer experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub folds: usize,
    /// Evaluate only the first folds; `None` runs all of them.
    pub max_folds: Option<usize>,
    /// Share of each training fold, in acquisition order, that the target
    /// subject contributes.
    pub budget: SplitSpec,
    pub template_mode: TemplateMode,
    pub variants: Vec<Variant>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            folds: 5,
            max_folds: None,
            budget: SplitSpec::full(),
            template_mode: TemplateMode::default(),
            variants: vec![Variant::Full],
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(invalid!("need at least 2 folds, got {}", self.folds));
        }
        if self.max_folds == Some(0) {
            return Err(invalid!("max_folds must be positive"));
        }
        if self.variants.is_empty() {
            return Err(invalid!("no variants selected"));
        }
        self.budget.validate()
    }
}

/// One JSON document with a section per module. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Fold assignment and budget sampling; the per-module seeds live in
    /// their own sections.
    pub seed: u64,
    /// Directory holding one store per subject. `None` generates the
    /// synthetic cohort described by `synth` inside the run directory.
    pub data_dir: Option<PathBuf>,
    pub target: String,
    pub source: String,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic".into(),
            seed: 0,
            data_dir: None,
            target: SynthSpec::subject_id(1),
            source: SynthSpec::subject_id(0),
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            pretrain: PretrainConfig::default(),
            transfer: TransferConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic golden/illiterate pair that runs in minutes on one
    /// core.
    pub fn desk_scale() -> Self {
        let mut c = ExperimentConfig::default();
        c.synth = SynthSpec {
            channels: 4,
            epochs_per_subject: 1320,
            mixing_variability: 0.0,
            background: 0.0,
            skills: vec![1.0, 0.3],
            ..SynthSpec::default()
        };
        c.preprocess.crop.image_size = 16;
        c.pretrain.epochs = 30;
        c.pretrain.batch_size = 32;
        c.transfer.epochs = 60;
        c.transfer.batch_size = 32;
        c.transfer.optimizer = crate::training::OptimizerConfig::adam(1e-4);
        // A narrow residual G started near the identity generalizes from a
        // few hundred target epochs; wider ones memorize the training fold.
        c.transfer.generator.encoder_widths = [4, 8, 16];
        c.transfer.generator.decoder_widths = [8, 4, 4];
        c.transfer.generator.residual = true;
        c.transfer.generator.output_init_scale = 0.01;
        c.protocol.folds = 2;
        c
    }

    /// Sets every seed of the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.mixing_seed = seed;
        self.pretrain.seed = seed;
        self.transfer.seed = seed;
        self.protocol.budget.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.trim().is_empty() {
            return Err(invalid!("dataset name is empty"));
        }
        if self.target == self.source {
            return Err(invalid!("target and source are both {}", self.target));
        }
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.pretrain.validate()?;
        self.transfer.validate()?;
        self.protocol.validate()?;
        for v in &self.protocol.variants {
            v.apply(&self.transfer).validate()?;
        }
        Ok(())
    }

    /// Reads a config file, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&raw)?;
        let value = match value.get("manifest_version") {
            Some(_) => value
                .get("config")
                .cloned()
                .ok_or_else(|| invalid!("{} is a manifest without a config", path.display()))?,
            None => value,
        };
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| invalid!("config {}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn hash(&self) -> String {
        canonical_hash(self, &[])
    }

    pub fn budget(&self) -> &SplitSpec {
        &self.protocol.budget
    }

    pub fn set_budget(&mut self, fraction: f64, mode: SplitMode) {
        self.protocol.budget.fraction = fraction;
        self.protocol.budget.mode = mode;
    }
}

/// SHA-256 over the key-sorted JSON form of `section` followed by `inputs`.
pub fn canonical_hash<T: Serialize>(section: &T, inputs: &[&str]) -> String {
    // serde_json maps are ordered by key, so equal values give equal text.
    let value = serde_json::to_value(section).expect("config sections serialize");
    let mut h = Sha256::new();
    h.update(value.to_string().as_bytes());
    for i in inputs {
        h.update([0u8]);
        h.update(i.as_bytes());
    }
    hex::encode(h.finalize())
}
