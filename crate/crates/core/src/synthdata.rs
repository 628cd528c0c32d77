//! Seeded synthetic RSVP-like subjects with a known target burst.
//!
//! Each subject mixes four latent sources into `C` channels through an
//! orthonormal matrix. Source 0 carries a Hanning-windowed 10 Hz burst on
//! target epochs, scaled by `separation × skill`; the other sources carry
//! random alpha-band background, and every channel gets white sensor noise.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eeg_io::{EpochSet, NON_TARGET, TARGET};
use crate::error::{invalid, Result};
use crate::evaluate::{balanced_accuracy, ConfusionCounts};
use crate::preprocess::RawRecording;

pub const NUM_SOURCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub channels: usize,
    pub sampling_rate: f64,
    pub epochs_per_subject: usize,
    /// Non-targets per target.
    pub target_ratio: usize,
    pub mixing_seed: u64,
    /// 0 gives every subject the same mixing matrix, 1 independent ones.
    pub mixing_variability: f64,
    /// Peak burst amplitude on target epochs before skill scaling.
    pub separation: f64,
    /// Standard deviation of the white sensor noise.
    pub noise_sigma: f64,
    /// Peak amplitude scale of the latent alpha background.
    pub background: f64,
    /// Per-subject skill in (0, 1]; missing entries default to 1.
    pub skills: Vec<f64>,
    pub epoch_s: f64,
    /// Extra signal before and after each epoch so long filters fit.
    pub context_s: f64,
    pub burst_hz: f64,
    pub burst_width_s: f64,
    pub burst_latency_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 2,
            channels: 8,
            sampling_rate: 250.0,
            epochs_per_subject: 440,
            target_ratio: 10,
            mixing_seed: 0,
            mixing_variability: 0.3,
            separation: 5.0,
            noise_sigma: 1.0,
            background: 1.0,
            skills: Vec::new(),
            epoch_s: 1.0,
            context_s: 3.0,
            burst_hz: 10.0,
            burst_width_s: 0.2,
            burst_latency_s: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.epochs_per_subject == 0 {
            return Err(invalid!("need at least one subject and one epoch"));
        }
        if self.channels < NUM_SOURCES {
            return Err(invalid!("need at least {NUM_SOURCES} channels for orthonormal mixing, got {}", self.channels));
        }
        if !(self.sampling_rate > 0.0) || !(self.epoch_s > 0.0) || !(self.context_s >= 0.0) {
            return Err(invalid!("sampling rate and epoch length must be positive"));
        }
        if self.target_ratio == 0 {
            return Err(invalid!("target ratio must be at least 1"));
        }
        if !(self.separation >= 0.0) || !(self.noise_sigma > 0.0) || !(self.background >= 0.0) {
            return Err(invalid!("need separation >= 0, noise sigma > 0, background >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mixing_variability) {
            return Err(invalid!("mixing variability must be in [0, 1]"));
        }
        if let Some(s) = self.skills.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return Err(invalid!("skill {s} outside (0, 1]"));
        }
        if self.burst_latency_s + self.burst_width_s / 2.0 > self.epoch_s || self.burst_latency_s < self.burst_width_s / 2.0 {
            return Err(invalid!("burst must lie inside the epoch"));
        }
        Ok(())
    }

    pub fn skill(&self, subject: usize) -> f64 {
        self.skills.get(subject).copied().unwrap_or(1.0)
    }

    pub fn subject_id(subject: usize) -> String {
        format!("S{}", subject + 1)
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.sampling_rate).round() as usize
    }

    pub fn n_targets(&self) -> usize {
        ((self.epochs_per_subject as f64) / (self.target_ratio as f64 + 1.0)).round().max(1.0) as usize
    }

    /// Burst waveform over one epoch (peak 1, zero outside its window).
    pub fn burst_template(&self) -> Array1<f64> {
        let n = self.samples(self.epoch_s);
        let fs = self.sampling_rate;
        let half = self.burst_width_s / 2.0;
        Array1::from_shape_fn(n, |i| {
            let dt = i as f64 / fs - self.burst_latency_s;
            if dt.abs() > half {
                0.0
            } else {
                let w = 0.5 * (1.0 + (PI * dt / half).cos());
                w * (2.0 * PI * self.burst_hz * dt).cos()
            }
        })
    }

    /// Orthonormal `C × 4` mixing matrix of one subject.
    pub fn mixing(&self, subject: usize) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut base_rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        let base = Array2::from_shape_fn((self.channels, NUM_SOURCES), |_| normal.sample(&mut base_rng));
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        rng.set_stream(subject as u64 + 1);
        let own = Array2::from_shape_fn((self.channels, NUM_SOURCES), |_| normal.sample(&mut rng));
        let v = self.mixing_variability;
        gram_schmidt(base * (1.0 - v) + own * v)
    }
}

fn gram_schmidt(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    m
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5_0000_0000 + subject as u64);
    rng
}

/// Latent alpha background, `[sources, len]`. The burst source stays
/// silent so a spatial filter on its topography rejects the background.
fn background(spec: &SynthSpec, len: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut s = Array2::zeros((NUM_SOURCES, len));
    if spec.background == 0.0 {
        return s;
    }
    for mut row in s.outer_iter_mut().skip(1) {
        let amp = spec.background * rng.gen_range(0.5..1.5);
        let f = rng.gen_range(8.0..12.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (t, v) in row.iter_mut().enumerate() {
            *v = amp * (2.0 * PI * f * t as f64 / spec.sampling_rate + phase).sin();
        }
    }
    s
}

fn sensors(spec: &SynthSpec, mixing: &Array2<f64>, latent: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
    let mut x = mixing.dot(latent);
    x.mapv_inplace(|v| v + noise.sample(rng));
    x
}

fn label_sequence(spec: &SynthSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    use rand::seq::SliceRandom;
    let n_t = ((count as f64) / (spec.target_ratio as f64 + 1.0)).round().max(1.0) as usize;
    let mut labels: Vec<u8> = (0..count).map(|i| if i < n_t { TARGET } else { NON_TARGET }).collect();
    labels.shuffle(rng);
    labels
}

/// One subject as padded epochs: each epoch holds `context_s` of signal on
/// either side of its 1-epoch analysis window.
pub fn generate_subject(spec: &SynthSpec, subject: usize, seed: u64) -> Result<EpochSet> {
    spec.validate()?;
    let mut rng = subject_rng(seed, subject);
    let mixing = spec.mixing(subject);
    let ctx = spec.samples(spec.context_s);
    let win = spec.samples(spec.epoch_s);
    let len = win + 2 * ctx;
    let burst = spec.burst_template();
    let amp = spec.separation * spec.skill(subject);
    let labels = label_sequence(spec, spec.epochs_per_subject, &mut rng);
    let mut data = Array3::<f32>::zeros((labels.len(), spec.channels, len));
    for (i, &label) in labels.iter().enumerate() {
        let mut latent = background(spec, len, &mut rng);
        if label == TARGET {
            latent.row_mut(0).slice_mut(ndarray::s![ctx..ctx + win]).scaled_add(amp, &burst);
        }
        let x = sensors(spec, &mixing, &latent, &mut rng);
        data.index_axis_mut(Axis(0), i).assign(&x.mapv(|v| v as f32));
    }
    let n = labels.len();
    let mut set = EpochSet::new(data, labels, SynthSpec::subject_id(subject), spec.sampling_rate)?;
    set.onset_index = vec![ctx; n];
    set.validate()?;
    Ok(set)
}

/// One subject as a continuous recording with stimulus onsets every
/// `soa_s` seconds (bursts of neighbouring targets may overlap).
pub fn generate_raw(spec: &SynthSpec, subject: usize, seed: u64, soa_s: f64) -> Result<RawRecording> {
    spec.validate()?;
    if !(soa_s > 0.0) {
        return Err(invalid!("stimulus onset asynchrony must be positive"));
    }
    let mut rng = subject_rng(seed, subject);
    let mixing = spec.mixing(subject);
    let ctx = spec.samples(spec.context_s);
    let win = spec.samples(spec.epoch_s);
    let step = spec.samples(soa_s).max(1);
    let n = spec.epochs_per_subject;
    let len = 2 * ctx + (n - 1) * step + win;
    let labels = label_sequence(spec, n, &mut rng);
    let onsets: Vec<usize> = (0..n).map(|i| ctx + i * step).collect();
    let mut latent = background(spec, len, &mut rng);
    let burst = spec.burst_template();
    let amp = spec.separation * spec.skill(subject);
    for (&o, &l) in onsets.iter().zip(&labels) {
        if l == TARGET {
            latent.row_mut(0).slice_mut(ndarray::s![o..o + win]).scaled_add(amp, &burst);
        }
    }
    let data = sensors(spec, &mixing, &latent, &mut rng);
    let raw = RawRecording { data, sampling_rate: spec.sampling_rate, onsets, labels, subject_id: SynthSpec::subject_id(subject) };
    raw.validate()?;
    Ok(raw)
}

/// Balanced accuracy of a detector that knows the subject's burst
/// topography and waveform: it correlates the spatially projected analysis
/// window with the burst and thresholds halfway between the class means.
pub fn matched_filter_oracle(set: &EpochSet, spec: &SynthSpec, subject: usize) -> Result<f64> {
    spec.validate()?;
    set.validate()?;
    let a0 = spec.mixing(subject).column(0).to_owned();
    let burst = spec.burst_template();
    let energy = burst.dot(&burst);
    let threshold = 0.5 * spec.separation * spec.skill(subject) * energy;
    let win = burst.len();
    let mut preds = Vec::with_capacity(set.len());
    for (i, epoch) in set.data.outer_iter().enumerate() {
        let on = set.onset_index[i];
        if on + win > epoch.ncols() || a0.len() != epoch.nrows() {
            return Err(invalid!("epoch {i} does not match the synthetic layout"));
        }
        let window = epoch.slice(ndarray::s![.., on..on + win]).mapv(|v| v as f64);
        let projected = a0.dot(&window);
        let stat = projected.dot(&burst);
        preds.push(u8::from(stat > threshold));
    }
    balanced_accuracy(&ConfusionCounts::from_predictions(&preds, &set.labels)?)
}
