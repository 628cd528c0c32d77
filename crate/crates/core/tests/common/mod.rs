#![allow(dead_code)]

use cssstn::models::{ClassifierConfig, GeneratorConfig};
use cssstn::preprocess::{preprocess_pipeline, FeatureSet, PipelineInput, PreprocessConfig};
use cssstn::synthdata::{generate_subject, SynthSpec};
use cssstn::training::PretrainConfig;

pub fn small_spec(channels: usize, epochs: usize, skills: Vec<f64>) -> SynthSpec {
    SynthSpec {
        channels,
        epochs_per_subject: epochs,
        mixing_variability: 0.0,
        background: 0.0,
        skills,
        ..SynthSpec::default()
    }
}

pub fn preprocess_config(image_size: usize) -> PreprocessConfig {
    let mut c = PreprocessConfig::default();
    c.crop.image_size = image_size;
    c
}

pub fn features(spec: &SynthSpec, subject: usize, seed: u64, image_size: usize) -> FeatureSet {
    let set = generate_subject(spec, subject, seed).unwrap();
    preprocess_pipeline(&PipelineInput::Epochs(set), &preprocess_config(image_size)).unwrap()
}

pub fn tiny_classifier() -> ClassifierConfig {
    ClassifierConfig { widths: [4, 8, 8], hidden: 16, ..ClassifierConfig::default() }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        encoder_widths: [4, 8, 8],
        decoder_widths: [8, 4, 4],
        ..GeneratorConfig::default()
    }
}

pub fn quick_pretrain(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 32,
        seed,
        classifier: tiny_classifier(),
        ..PretrainConfig::default()
    }
}

/// Two Gaussian blobs with unit noise whose means are `sep` apart along a
/// direction that is constant in space and alternates sign per channel.
/// Every fourth sample is a target.
pub fn blobs(n: usize, channels: usize, size: usize, sep: f64, seed: u64) -> FeatureSet {
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    let dims = channels * size * size;
    let dir: Vec<f64> = (0..dims).map(|k| if (k / (size * size)) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let norm = (dims as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
    let mut values = Array4::<f32>::zeros((n, channels, size, size));
    for (i, mut x) in values.outer_iter_mut().enumerate() {
        for (v, d) in x.iter_mut().zip(&dir) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = (noise + f64::from(labels[i]) * sep * d / norm) as f32;
        }
    }
    FeatureSet { values, labels, subject_id: format!("blobs{seed}"), acquisition_order: (0..n).collect() }
}
