//! Epoch datasets: persistence, class balancing and subsetting.
//!
//! An epoch store is a directory holding `meta.json` (shape, labels,
//! acquisition order and subject metadata) next to `data.bin`, a row-major
//! little-endian `float32` payload, optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Error, Result};

pub const STORE_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

pub const NON_TARGET: u8 = 0;
pub const TARGET: u8 = 1;

/// Labeled per-trial multichannel EEG segments of one subject.
///
/// `data` is `[N, C, T]`. `onset_index[i]` is the sample of stimulus onset
/// within epoch `i`, which lets an epoch carry context before and after the
/// analysis window. `acquisition_order` is the chronological rank of every
/// epoch and is always a permutation of `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub data: Array3<f32>,
    pub labels: Vec<u8>,
    pub subject_id: String,
    pub sampling_rate: f64,
    pub onset_index: Vec<usize>,
    pub acquisition_order: Vec<usize>,
}

impl EpochSet {
    /// Builds a set in chronological storage order with onset at sample 0.
    pub fn new(
        data: Array3<f32>,
        labels: Vec<u8>,
        subject_id: impl Into<String>,
        sampling_rate: f64,
    ) -> Result<Self> {
        let n = data.len_of(Axis(0));
        let set = EpochSet {
            data,
            labels,
            subject_id: subject_id.into(),
            sampling_rate,
            onset_index: vec![0; n],
            acquisition_order: (0..n).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(channels: usize, samples: usize, subject_id: &str, sampling_rate: f64) -> Self {
        EpochSet {
            data: Array3::zeros((0, channels, samples)),
            labels: Vec::new(),
            subject_id: subject_id.to_string(),
            sampling_rate,
            onset_index: Vec::new(),
            acquisition_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn samples(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.data.len_of(Axis(0));
        if self.labels.len() != n
            || self.acquisition_order.len() != n
            || self.onset_index.len() != n
        {
            return Err(shape_err!(
                "epoch set has {} epochs but {} labels, {} order entries, {} onsets",
                n,
                self.labels.len(),
                self.acquisition_order.len(),
                self.onset_index.len()
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > TARGET) {
            return Err(invalid!("label {bad} is not 0 or 1"));
        }
        check_permutation(&self.acquisition_order)?;
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(invalid!("sampling rate {} must be positive", self.sampling_rate));
        }
        let t = self.samples();
        if let Some(&o) = self.onset_index.iter().find(|&&o| o >= t.max(1)) {
            return Err(invalid!("onset index {o} outside epoch of {t} samples"));
        }
        Ok(())
    }

    /// Selects epochs by storage index (repeats allowed). The acquisition
    /// order of the result ranks the picks by their original rank, with
    /// repeated picks of one epoch placed consecutively.
    pub fn select(&self, indices: &[usize]) -> EpochSet {
        let data = self.data.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let onset_index = indices.iter().map(|&i| self.onset_index[i]).collect();
        let keys: Vec<(usize, usize)> = indices
            .iter()
            .enumerate()
            .map(|(pos, &i)| (self.acquisition_order[i], pos))
            .collect();
        EpochSet {
            data,
            labels,
            subject_id: self.subject_id.clone(),
            sampling_rate: self.sampling_rate,
            onset_index,
            acquisition_order: rerank(&keys),
        }
    }

    /// Storage indices sorted chronologically.
    pub fn chronological_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by_key(|&i| self.acquisition_order[i]);
        idx
    }
}

/// Ranks `keys` (ties broken by the second element) into `0..n`.
pub(crate) fn rerank(keys: &[(usize, usize)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut ranks = vec![0; keys.len()];
    for (rank, i) in order.into_iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

pub(crate) fn check_permutation(order: &[usize]) -> Result<()> {
    let mut seen = vec![false; order.len()];
    for &o in order {
        if o >= order.len() || seen[o] {
            return Err(invalid!("acquisition order is not a permutation of 0..{}", order.len()));
        }
        seen[o] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Earliest,
    Latest,
    Random,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "earliest" => Ok(SplitMode::Earliest),
            "latest" => Ok(SplitMode::Latest),
            "random" => Ok(SplitMode::Random),
            other => Err(invalid!("unknown split mode `{other}`")),
        }
    }
}

/// Which part of a subject's recording to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn full() -> Self {
        SplitSpec {
            mode: SplitMode::Earliest,
            fraction: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(invalid!("fraction {} must lie in (0, 1]", self.fraction));
        }
        Ok(())
    }
}

/// Keeps every target and `ratio` non-targets per target, chosen uniformly
/// at random. Storage and chronological order of the kept epochs is preserved.
pub fn downsample_nontargets(set: &EpochSet, ratio: usize, seed: u64) -> Result<EpochSet> {
    if ratio == 0 {
        return Err(invalid!("downsampling ratio must be >= 1"));
    }
    let targets: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == TARGET).collect();
    if targets.is_empty() {
        return Err(invalid!("cannot downsample a set with zero target epochs"));
    }
    let mut non_targets: Vec<usize> =
        (0..set.len()).filter(|&i| set.labels[i] == NON_TARGET).collect();
    let wanted = ratio.saturating_mul(targets.len());
    if non_targets.len() > wanted {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        non_targets.shuffle(&mut rng);
        non_targets.truncate(wanted);
    }
    let mut keep: Vec<usize> = targets.into_iter().chain(non_targets).collect();
    keep.sort_unstable();
    Ok(set.select(&keep))
}

/// Duplicates target epochs (sampling with replacement) until both classes
/// have equal counts. Non-targets are untouched.
pub fn oversample_targets(set: &EpochSet, seed: u64) -> Result<EpochSet> {
    let picks = oversample_indices(&set.labels, seed)?;
    if picks.len() == set.len() {
        return Ok(set.clone());
    }
    Ok(set.select(&picks))
}

/// Indices after duplicating random targets until both classes are equal
/// in size. Sorted, every original index present.
pub fn oversample_indices(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let targets: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == TARGET).collect();
    let n_non = labels.len() - targets.len();
    if targets.is_empty() || n_non == 0 {
        return Err(invalid!(
            "oversampling needs both classes (targets {}, non-targets {})",
            targets.len(),
            n_non
        ));
    }
    let mut picks: Vec<usize> = (0..labels.len()).collect();
    if targets.len() < n_non {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        picks.extend((targets.len()..n_non).map(|_| targets[rng.gen_range(0..targets.len())]));
        picks.sort_unstable();
    }
    Ok(picks)
}

/// Chronological or random fraction of a set; `round(fraction * N)` epochs
/// returned in chronological order.
pub fn subset(set: &EpochSet, spec: &SplitSpec) -> Result<EpochSet> {
    let idx = subset_indices(&set.acquisition_order, spec)?;
    Ok(set.select(&idx))
}

/// Storage indices selected by `spec`, in chronological order.
pub fn subset_indices(acquisition_order: &[usize], spec: &SplitSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let n = acquisition_order.len();
    let size = (spec.fraction * n as f64).round() as usize;
    if size == 0 {
        return Err(invalid!(
            "fraction {} of {} epochs selects nothing",
            spec.fraction,
            n
        ));
    }
    let mut chrono: Vec<usize> = (0..n).collect();
    chrono.sort_by_key(|&i| acquisition_order[i]);
    let mut picked = match spec.mode {
        SplitMode::Earliest => chrono[..size].to_vec(),
        SplitMode::Latest => chrono[n - size..].to_vec(),
        SplitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rand::seq::index::sample(&mut rng, n, size).into_vec()
        }
    };
    picked.sort_by_key(|&i| acquisition_order[i]);
    Ok(picked)
}

/// One cross-validation split as storage indices (both sorted ascending).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split with seeded shuffling inside each class.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(invalid!("k-fold needs k >= 2, got {k}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    // Each class is dealt round-robin starting where the previous class
    // stopped so the total fold sizes also differ by at most one.
    let mut offset = 0;
    for class in [NON_TARGET, TARGET] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(invalid!(
                "class {class} has {} members, fewer than k = {k}",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > TARGET) {
        return Err(invalid!("label {bad} is not 0 or 1"));
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compression {
    #[default]
    None,
    Gzip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Epochs,
    Tfr,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub version: u32,
    pub kind: StoreKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default)]
    pub compression: Compression,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
    pub labels: Vec<u8>,
    pub acquisition_order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_index: Option<Vec<usize>>,
}

pub(crate) fn write_store(dir: &Path, meta: &StoreMeta, payload: &[f32]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if meta.compression == Compression::Gzip {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(dir, e))?;
        bytes = enc.finish().map_err(|e| Error::io(dir, e))?;
    }
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Reads only the metadata of a store.
pub fn read_store_meta(dir: &Path) -> Result<StoreMeta> {
    let meta_path = dir.join(META_FILE);
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Store(format!("{}: {e}", meta_path.display())))
}

pub(crate) fn read_store(dir: &Path) -> Result<(StoreMeta, Vec<f32>)> {
    let meta = read_store_meta(dir)?;
    if meta.version != STORE_VERSION {
        return Err(Error::Store(format!(
            "unsupported store version {} (expected {STORE_VERSION})",
            meta.version
        )));
    }
    if meta.dtype != "float32" {
        return Err(Error::Store(format!("unsupported dtype `{}`", meta.dtype)));
    }
    let data_path = dir.join(DATA_FILE);
    let mut bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if meta.compression == Compression::Gzip {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Store(format!("{}: bad gzip payload: {e}", data_path.display())))?;
        bytes = out;
    }
    let expected: usize = meta.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Store(format!(
            "declared shape {:?} needs {} bytes but payload has {}",
            meta.shape,
            expected * 4,
            bytes.len()
        )));
    }
    let n = meta.shape.first().copied().unwrap_or(0);
    if meta.labels.len() != n || meta.acquisition_order.len() != n {
        return Err(Error::Store(format!(
            "declared N = {n} but {} labels and {} order entries",
            meta.labels.len(),
            meta.acquisition_order.len()
        )));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta, payload))
}

pub fn save_epoch_store(set: &EpochSet, path: &Path) -> Result<()> {
    save_epoch_store_with(set, path, Compression::None)
}

pub fn save_epoch_store_with(set: &EpochSet, path: &Path, compression: Compression) -> Result<()> {
    set.validate()?;
    let meta = StoreMeta {
        version: STORE_VERSION,
        kind: StoreKind::Epochs,
        shape: set.data.shape().to_vec(),
        dtype: "float32".into(),
        compression,
        subject_id: set.subject_id.clone(),
        sampling_rate: Some(set.sampling_rate),
        labels: set.labels.clone(),
        acquisition_order: set.acquisition_order.clone(),
        onset_index: Some(set.onset_index.clone()),
    };
    let payload: Vec<f32> = set.data.iter().copied().collect();
    write_store(path, &meta, &payload)
}

pub fn load_epoch_store(path: &Path) -> Result<EpochSet> {
    let (meta, payload) = read_store(path)?;
    if meta.kind != StoreKind::Epochs {
        return Err(Error::Store(format!("{} is not an epoch store", path.display())));
    }
    let &[n, c, t] = meta.shape.as_slice() else {
        return Err(Error::Store(format!("epoch store shape {:?} is not 3-D", meta.shape)));
    };
    let data = Array3::from_shape_vec((n, c, t), payload)
        .map_err(|e| Error::Store(e.to_string()))?;
    let set = EpochSet {
        data,
        labels: meta.labels,
        subject_id: meta.subject_id,
        sampling_rate: meta
            .sampling_rate
            .ok_or_else(|| Error::Store("epoch store lacks sampling_rate".into()))?,
        onset_index: meta.onset_index.unwrap_or_else(|| vec![0; n]),
        acquisition_order: meta.acquisition_order,
    };
    set.validate().map_err(|e| Error::Store(e.to_string()))?;
    Ok(set)
}

/// SHA-256 over the meta and payload files of a store directory.
pub fn store_checksum(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [META_FILE, DATA_FILE] {
        let p = path.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn toy(n_target: usize, n_non: usize) -> EpochSet {
        let n = n_target + n_non;
        let data = Array::from_shape_fn((n, 2, 5), |(i, c, t)| (i * 100 + c * 10 + t) as f32);
        // Interleave targets among non-targets.
        let mut labels = vec![NON_TARGET; n];
        let stride = n / n_target.max(1);
        for j in 0..n_target {
            labels[j * stride] = TARGET;
        }
        EpochSet::new(data, labels, "S1", 250.0).unwrap()
    }

    fn epoch_id(set: &EpochSet, i: usize) -> usize {
        set.data[[i, 0, 0]] as usize / 100
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = EpochSet::new(
            Array::from_shape_fn((4, 2, 250), |(i, c, t)| ((i + c * 7 + t) as f32).sin() * 1e-5),
            vec![0, 1, 0, 0],
            "S7",
            250.0,
        )
        .unwrap();
        set.acquisition_order = vec![2, 0, 3, 1];
        set.onset_index = vec![0, 3, 5, 7];
        for comp in [Compression::None, Compression::Gzip] {
            let p = dir.path().join(format!("{comp:?}"));
            save_epoch_store_with(&set, &p, comp).unwrap();
            assert_eq!(load_epoch_store(&p).unwrap(), set);
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = EpochSet::empty(3, 250, "S0", 250.0);
        save_epoch_store(&set, dir.path()).unwrap();
        let back = load_epoch_store(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.data.shape(), &[0, 3, 250]);
    }

    #[test]
    fn declared_n_must_match_payload() {
        let dir = tempfile::tempdir().unwrap();
        save_epoch_store(&toy(1, 3), dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value =
            serde_json::from_slice(&fs::read(&meta_path).unwrap()).unwrap();
        meta["shape"][0] = 5.into();
        fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = load_epoch_store(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Store(_)), "{err}");
    }

    #[test]
    fn rejects_unknown_version_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        save_epoch_store(&toy(1, 3), dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value =
            serde_json::from_slice(&fs::read(&meta_path).unwrap()).unwrap();
        meta["version"] = 99.into();
        fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(load_epoch_store(dir.path()).unwrap_err().to_string().contains("version"));
        fs::write(&meta_path, b"{ not json").unwrap();
        assert!(matches!(load_epoch_store(dir.path()), Err(Error::Store(_))));
    }

    #[test]
    fn downsample_hits_requested_ratio() {
        let set = toy(200, 5000);
        let out = downsample_nontargets(&set, 10, 3).unwrap();
        assert_eq!(out.count_class(TARGET), 200);
        assert_eq!(out.count_class(NON_TARGET), 2000);
        assert_eq!(out.len(), 2200);
        // chronological order kept
        let ids: Vec<usize> = out.chronological_indices().iter().map(|&i| epoch_id(&out, i)).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn downsample_saturates_and_handles_ratio_one() {
        let out = downsample_nontargets(&toy(10, 50), 10, 0).unwrap();
        assert_eq!(out.len(), 60);
        let out = downsample_nontargets(&toy(10, 100), 1, 0).unwrap();
        assert_eq!((out.count_class(TARGET), out.count_class(NON_TARGET)), (10, 10));
        assert!(downsample_nontargets(&toy(0, 10), 10, 0).is_err());
    }

    #[test]
    fn oversample_balances_classes() {
        let out = oversample_targets(&toy(200, 2000), 1).unwrap();
        assert_eq!(out.count_class(TARGET), 2000);
        assert_eq!(out.count_class(NON_TARGET), 2000);
        out.validate().unwrap();

        let balanced = toy(5, 5);
        assert_eq!(oversample_targets(&balanced, 1).unwrap(), balanced);

        let one = toy(1, 3);
        let out = oversample_targets(&one, 9).unwrap();
        let target_ids: Vec<usize> = (0..out.len())
            .filter(|&i| out.labels[i] == TARGET)
            .map(|i| epoch_id(&out, i))
            .collect();
        assert_eq!(target_ids, vec![0, 0, 0]);
        assert!(oversample_targets(&toy(0, 4), 0).is_err());
    }

    #[test]
    fn subset_modes() {
        let mut set = toy(10, 90);
        // Scramble storage vs chronology.
        set.acquisition_order = (0..100).map(|i| (i * 37) % 100).collect();
        let spec = SplitSpec { mode: SplitMode::Earliest, fraction: 0.25, seed: 0 };
        let idx = subset_indices(&set.acquisition_order, &spec).unwrap();
        let ranks: Vec<usize> = idx.iter().map(|&i| set.acquisition_order[i]).collect();
        assert_eq!(ranks, (0..25).collect::<Vec<_>>());

        let latest = SplitSpec { mode: SplitMode::Latest, ..spec };
        let idx = subset_indices(&set.acquisition_order, &latest).unwrap();
        assert_eq!(set.acquisition_order[idx[0]], 75);

        let full = SplitSpec { fraction: 1.0, ..spec };
        assert_eq!(subset(&set, &full).unwrap().len(), 100);

        let random = SplitSpec { mode: SplitMode::Random, fraction: 0.25, seed: 42 };
        let a = subset(&set, &random).unwrap();
        assert_eq!(a, subset(&set, &random).unwrap());
        assert_eq!(a.len(), 25);

        let tiny = SplitSpec { fraction: 0.001, ..spec };
        assert!(subset(&set, &tiny).is_err());
        let bad = SplitSpec { fraction: 1.5, ..spec };
        assert!(subset(&set, &bad).is_err());
    }

    #[test]
    fn folds_are_stratified_disjoint_and_covering() {
        let set = toy(20, 200);
        let folds = stratified_folds(&set.labels, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        let mut covered = vec![0; set.len()];
        for f in &folds {
            let t = f.test.iter().filter(|&&i| set.labels[i] == TARGET).count();
            assert_eq!(t, 4);
            assert_eq!(f.test.len() - t, 40);
            for &i in &f.test {
                covered[i] += 1;
            }
            assert_eq!(f.train.len() + f.test.len(), set.len());
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(folds, stratified_folds(&set.labels, 5, 11).unwrap());
    }

    #[test]
    fn two_folds_on_balanced_set_are_halves() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let folds = stratified_folds(&labels, 2, 0).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 10);
            assert_eq!(f.test.iter().filter(|&&i| labels[i] == TARGET).count(), 5);
        }
        assert!(stratified_folds(&[0, 0, 0, 1], 2, 0).is_err());
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn balancing_only_changes_membership(n_t in 1usize..12, n_n in 1usize..60, seed in any::<u64>()) {
                let set = toy(n_t, n_n);
                for out in [downsample_nontargets(&set, 3, seed).unwrap(), oversample_targets(&set, seed).unwrap()] {
                    out.validate().unwrap();
                    for i in 0..out.len() {
                        let id = epoch_id(&out, i);
                        prop_assert_eq!(out.data.index_axis(Axis(0), i), set.data.index_axis(Axis(0), id));
                        prop_assert_eq!(out.labels[i], set.labels[id]);
                    }
                }
                let over = oversample_targets(&set, seed).unwrap();
                if n_t <= n_n {
                    prop_assert_eq!(over.count_class(TARGET), over.count_class(NON_TARGET));
                }
            }

            #[test]
            fn folds_partition(labels in proptest::collection::vec(0u8..2, 10..80), k in 2usize..5, seed in any::<u64>()) {
                let pos = labels.iter().filter(|&&l| l == 1).count();
                prop_assume!(pos >= k && labels.len() - pos >= k);
                let folds = stratified_folds(&labels, k, seed).unwrap();
                let mut seen = vec![false; labels.len()];
                for f in &folds {
                    let t = f.test.iter().filter(|&&i| labels[i] == 1).count() as f64;
                    prop_assert!((t - pos as f64 / k as f64).abs() < 1.0 + 1e-9);
                    for &i in &f.test { prop_assert!(!seen[i]); seen[i] = true; }
                }
                prop_assert!(seen.into_iter().all(|s| s));
            }
        }
    }
}
