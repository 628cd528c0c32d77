//! Balanced accuracy, soft-vote ensembling, golden-subject selection and
//! report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eeg_io::{Fold, NON_TARGET, TARGET};
use crate::error::{invalid, shape_err, Error, Result};
use crate::models::nn::Mode;
use crate::models::{Classifier, Generator};
use crate::preprocess::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(shape_err!("{} predictions for {} labels", predicted.len(), labels.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (y, p) {
                (TARGET, TARGET) => c.tp += 1,
                (TARGET, NON_TARGET) => c.fn_ += 1,
                (NON_TARGET, NON_TARGET) => c.tn += 1,
                (NON_TARGET, TARGET) => c.fp += 1,
                _ => return Err(invalid!("labels must be 0 or 1, got label {y} prediction {p}")),
            }
        }
        Ok(c)
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(invalid!("balanced accuracy needs both classes (positives {}, negatives {})", c.positives(), c.negatives()));
    }
    let tpr = c.tp as f64 / c.positives() as f64;
    let tnr = c.tn as f64 / c.negatives() as f64;
    Ok((tpr + tnr) / 2.0)
}

/// Element-wise mean of two probability vectors; ties go to class 0.
pub fn soft_vote(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, u8)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("cannot vote over lengths {} and {}", a.len(), b.len()));
    }
    let probs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    Ok((probs, best as u8))
}

/// Maps target features into the source domain before `C_S` sees them.
pub trait FeatureMap: Sync {
    fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>>;
}

impl FeatureMap for Generator {
    fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.forward(x, &mut Mode::Eval)
    }
}

pub struct Identity;

impl FeatureMap for Identity {
    fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(x.clone())
    }
}

/// Fails when a test index was also used for training.
pub fn check_leakage(train: &[usize], test: &[usize]) -> Result<()> {
    let train: BTreeSet<usize> = train.iter().copied().collect();
    if let Some(i) = test.iter().find(|i| train.contains(i)) {
        return Err(Error::Leakage(format!("test index {i} is also a training index")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: usize,
    /// Target epochs the fold's models were trained on.
    pub n_train: usize,
    pub n_test: usize,
    pub ensemble: ConfusionCounts,
    pub baseline: ConfusionCounts,
    pub source_path: ConfusionCounts,
    pub ensemble_bacc: f64,
    /// `C_T` alone.
    pub baseline_bacc: f64,
    /// `C_S ∘ G` alone.
    pub source_bacc: f64,
}

/// Scores one fold: `ŷ_S′ = C_S(G(x_T))`, `ŷ_T = C_T(x_T)`, soft-voted.
pub fn evaluate_fold(fold_id: usize, g: &dyn FeatureMap, c_t: &Classifier, c_s: &Classifier, data: &FeatureSet, fold: &Fold) -> Result<FoldEvaluation> {
    check_leakage(&fold.train, &fold.test)?;
    if let Some(&bad) = fold.test.iter().find(|&&i| i >= data.len()) {
        return Err(invalid!("test index {bad} out of range for {} samples", data.len()));
    }
    let preds = fold
        .test
        .par_iter()
        .map(|&i| {
            let x = data.input(i);
            let pt = c_t.forward(&x, &mut Mode::Eval)?.probs;
            let ps = c_s.forward(&g.apply(&x)?, &mut Mode::Eval)?.probs;
            let (_, label) = soft_vote(&ps, &pt)?;
            Ok((label, u8::from(pt[1] > pt[0]), u8::from(ps[1] > ps[0])))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = fold.test.iter().map(|&i| data.labels[i]).collect();
    let pick = |f: fn(&(u8, u8, u8)) -> u8| preds.iter().map(f).collect::<Vec<u8>>();
    let ensemble = ConfusionCounts::from_predictions(&pick(|p| p.0), &labels)?;
    let baseline = ConfusionCounts::from_predictions(&pick(|p| p.1), &labels)?;
    let source_path = ConfusionCounts::from_predictions(&pick(|p| p.2), &labels)?;
    Ok(FoldEvaluation {
        fold: fold_id,
        n_train: fold.train.len(),
        n_test: fold.test.len(),
        ensemble_bacc: balanced_accuracy(&ensemble)?,
        baseline_bacc: balanced_accuracy(&baseline)?,
        source_bacc: balanced_accuracy(&source_path)?,
        ensemble,
        baseline,
        source_path,
    })
}

/// Balanced accuracy of a single classifier on the given indices.
pub fn classifier_accuracy(c: &Classifier, data: &FeatureSet, indices: &[usize]) -> Result<f64> {
    let preds = indices
        .par_iter()
        .map(|&i| Ok(c.forward(&data.input(i), &mut Mode::Eval)?.predicted()))
        .collect::<Result<Vec<u8>>>()?;
    let labels: Vec<u8> = indices.iter().map(|&i| data.labels[i]).collect();
    balanced_accuracy(&ConfusionCounts::from_predictions(&preds, &labels)?)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub dataset: String,
    pub target: String,
    pub source: String,
    pub variant: String,
    pub seed: u64,
    pub folds: Vec<FoldEvaluation>,
    pub mean: f64,
    pub std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    /// Mean below the target-only baseline mean.
    pub negative_transfer: bool,
    pub config: serde_json::Value,
}

impl TransferReport {
    pub fn from_folds(dataset: &str, target: &str, source: &str, variant: &str, seed: u64, folds: Vec<FoldEvaluation>, config: serde_json::Value) -> Result<Self> {
        if folds.is_empty() {
            return Err(invalid!("a report needs at least one fold"));
        }
        let (mean, std) = mean_std(&folds.iter().map(|f| f.ensemble_bacc).collect::<Vec<_>>());
        let (baseline_mean, baseline_std) = mean_std(&folds.iter().map(|f| f.baseline_bacc).collect::<Vec<_>>());
        Ok(TransferReport {
            dataset: dataset.into(),
            target: target.into(),
            source: source.into(),
            variant: variant.into(),
            seed,
            folds,
            mean,
            std,
            baseline_mean,
            baseline_std,
            negative_transfer: mean < baseline_mean,
            config,
        })
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}_{}_s{}", slug(&self.dataset), slug(&self.target), slug(&self.source), slug(&self.variant), self.seed)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.json", self.file_stem()));
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for ch in s.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Subject × classifier accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyTable {
    pub subjects: Vec<String>,
    pub classifiers: Vec<String>,
    /// One row per subject.
    pub values: Vec<Vec<f64>>,
}

impl AccuracyTable {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.classifiers.is_empty() {
            return Err(invalid!("accuracy table is empty"));
        }
        if self.values.len() != self.subjects.len() || self.values.iter().any(|r| r.len() != self.classifiers.len()) {
            return Err(shape_err!("accuracy table must be {} × {}", self.subjects.len(), self.classifiers.len()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid!("accuracy table has non-finite entries"));
        }
        Ok(())
    }
}

/// Subject with the highest row mean; ties go to the lower row std, then
/// the lexically smaller id.
pub fn select_golden_subject(table: &AccuracyTable) -> Result<String> {
    table.validate()?;
    let stats: Vec<(f64, f64, &String)> = table.values.iter().zip(&table.subjects).map(|(row, s)| {
        let (m, sd) = mean_std(row);
        (m, sd, s)
    }).collect();
    let best = stats
        .iter()
        .min_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(b.2)))
        .expect("non-empty table");
    Ok(best.2.clone())
}

/// Column order used by report tables; unknown variants follow, sorted.
pub const VARIANT_ORDER: [&str; 7] = [
    "CSSSTN w/o L_cont",
    "CSSSTN w/o L_style",
    "CSSSTN w/o L_sem",
    "CSSSTN w/o class",
    "CSSSTN-A",
    "CSSSTN-B",
    "CSSSTN",
];
pub const BASELINE_COLUMN: &str = "CNN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub subject: String,
    pub golden: bool,
    pub cells: BTreeMap<String, TableCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub reports: Vec<TransferReport>,
}

/// One row per target subject with mean ± std per method. Golden subjects
/// (any report's source) are marked `*`.
pub fn summarize(reports: &[TransferReport]) -> Result<SummaryTable> {
    if reports.is_empty() {
        return Err(invalid!("no reports to tabulate"));
    }
    let golden: BTreeSet<&str> = reports.iter().map(|r| r.source.as_str()).collect();
    let mut present: BTreeSet<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    let mut columns = vec![BASELINE_COLUMN.to_string()];
    for v in VARIANT_ORDER {
        if present.remove(v) {
            columns.push(v.to_string());
        }
    }
    columns.extend(present.into_iter().map(String::from));

    let mut by_subject: BTreeMap<&str, Vec<&TransferReport>> = BTreeMap::new();
    for r in reports {
        by_subject.entry(r.target.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (subject, rs) in by_subject {
        let mut folds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        // The baseline is shared by every variant run with the same seed.
        let mut seen_seeds = BTreeSet::new();
        for r in &rs {
            if seen_seeds.insert(r.seed) {
                folds.entry(BASELINE_COLUMN.into()).or_default().extend(r.folds.iter().map(|f| f.baseline_bacc));
            }
            folds.entry(r.variant.clone()).or_default().extend(r.folds.iter().map(|f| f.ensemble_bacc));
        }
        let cells = folds
            .into_iter()
            .map(|(k, v)| {
                let (mean, std) = mean_std(&v);
                (k, TableCell { mean, std, folds: v })
            })
            .collect();
        rows.push(TableRow { subject: subject.to_string(), golden: golden.contains(subject), cells });
    }
    Ok(SummaryTable { columns, rows, reports: reports.to_vec() })
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["subject".to_string()];
        for c in &self.columns {
            header.push(format!("{c} mean"));
            header.push(format!("{c} std"));
        }
        let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut fields = vec![if row.golden { format!("{}*", row.subject) } else { row.subject.clone() }];
            for c in &self.columns {
                match row.cells.get(c) {
                    Some(cell) => {
                        fields.push(format!("{:.6}", cell.mean));
                        fields.push(format!("{:.6}", cell.std));
                    }
                    None => fields.extend([String::new(), String::new()]),
                }
            }
            out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `summary.csv` and its full-detail JSON mirror `summary.json`.
pub fn report_tables(reports: &[TransferReport], dir: &Path) -> Result<ReportFiles> {
    let table = summarize(reports)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("summary.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
    Ok(ReportFiles { csv, json })
}

/// Projects rows onto their first two principal components. Uses the
/// `n × n` Gram matrix so wide feature vectors stay cheap.
pub fn pca_2d(rows: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, _) = rows.dim();
    if n < 2 {
        return Err(invalid!("need at least two rows for a projection"));
    }
    let mean = rows.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = rows - &mean;
    let mut gram = centered.dot(&centered.t());
    let mut out = Array2::zeros((n, 2));
    for k in 0..2 {
        let mut v = ndarray::Array1::from_shape_fn(n, |i| 1.0 + (i as f64 * 0.618_033_988_75).fract());
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = gram.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            let next = &w / norm;
            let delta = (&next - &v).mapv(f64::abs).sum();
            v = next;
            lambda = norm;
            if delta < 1e-12 {
                break;
            }
        }
        let vmax = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if vmax < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        out.column_mut(k).assign(&v.mapv(|x| x * lambda.sqrt()));
        let outer = v.view().insert_axis(ndarray::Axis(1)).dot(&v.view().insert_axis(ndarray::Axis(0)));
        gram = gram - outer * lambda;
    }
    Ok(out)
}
