//! Agreement between predicted and annotated intensity over SB/LIPA/MVPA.
//!
//! Undefined values (zero denominators) are `None` and serialize as `null`.
//! Precision or recall with a zero denominator is undefined; F1 is
//! undefined if either input is, and 0 when both are defined and 0.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::fsutil::{to_json_bytes, write_atomic};
use crate::stats::{summarise_defined, QuartileSummary};
use crate::zeroshot::PredictionRecord;
use crate::IntensityClass;

pub const REPORT_SCHEMA: &str = "camannot-eval/1";

/// Evaluation fails when more than this share of predictions cannot be joined to truth.
pub const MAX_UNMATCHED_FRACTION: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{truth} truth labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("{0} is not one of SB, LIPA, MVPA")]
    NotEvaluated(IntensityClass),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Rows are the true class, columns the prediction, both in SB, LIPA, MVPA order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn add(&mut self, truth: IntensityClass, pred: IntensityClass) -> Result<(), EvalError> {
        let t = truth.eval_index().ok_or(EvalError::NotEvaluated(truth))?;
        let p = pred.eval_index().ok_or(EvalError::NotEvaluated(pred))?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..3 {
            for j in 0..3 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..3).map(|i| self.counts[i][j]).sum()
    }

    /// Reorders classes: entry `[i][j]` of the result is `[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        let mut counts = [[0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                counts[i][j] = self.counts[perm[i]][perm[j]];
            }
        }
        ConfusionMatrix { counts }
    }
}

pub fn confusion_matrix(truth: &[IntensityClass], pred: &[IntensityClass]) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let mut m = ConfusionMatrix::default();
    for (t, p) in truth.iter().zip(pred) {
        m.add(*t, *p)?;
    }
    Ok(m)
}

/// `(p_o - p_e) / (1 - p_e)`; `None` for an empty matrix or when `p_e = 1`.
pub fn cohens_kappa(m: &ConfusionMatrix) -> Option<f64> {
    let total = m.total();
    if total == 0 {
        return None;
    }
    let expected: u128 = (0..3).map(|i| m.row_sum(i) as u128 * m.col_sum(i) as u128).sum();
    let total_sq = total as u128 * total as u128;
    if expected == total_sq {
        return None;
    }
    let p_o = m.trace() as f64 / total as f64;
    let p_e = expected as f64 / total_sq as f64;
    Some((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// True instances of the class.
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// One-vs-rest metrics for class index `i`.
pub fn class_stats(m: &ConfusionMatrix, i: usize) -> ClassMetrics {
    let tp = m.counts[i][i];
    let precision = ratio(tp, m.col_sum(i));
    let recall = ratio(tp, m.row_sum(i));
    ClassMetrics { precision, recall, f1: f1_score(precision, recall), support: m.row_sum(i) }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerClass {
    #[serde(rename = "SB")]
    pub sedentary: ClassMetrics,
    #[serde(rename = "LIPA")]
    pub light: ClassMetrics,
    #[serde(rename = "MVPA")]
    pub moderate_vigorous: ClassMetrics,
}

impl PerClass {
    pub fn get(&self, class: IntensityClass) -> Option<&ClassMetrics> {
        match class {
            IntensityClass::Sedentary => Some(&self.sedentary),
            IntensityClass::Light => Some(&self.light),
            IntensityClass::ModerateVigorous => Some(&self.moderate_vigorous),
            _ => None,
        }
    }

    pub fn by_index(&self, i: usize) -> &ClassMetrics {
        [&self.sedentary, &self.light, &self.moderate_vigorous][i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: u64,
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<f64>,
    /// Mean recall over classes with at least one true instance.
    pub macro_recall: Option<f64>,
    pub kappa: Option<f64>,
    pub per_class: PerClass,
}

pub fn class_metrics(m: &ConfusionMatrix) -> Metrics {
    let per_class = PerClass {
        sedentary: class_stats(m, 0),
        light: class_stats(m, 1),
        moderate_vigorous: class_stats(m, 2),
    };
    let recalls: Vec<f64> = (0..3).filter_map(|i| per_class.by_index(i).recall).collect();
    let macro_recall = (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64);
    Metrics {
        n: m.total(),
        confusion: *m,
        accuracy: ratio(m.trace(), m.total()),
        macro_recall,
        kappa: cohens_kappa(m),
        per_class,
    }
}

/// A prediction joined to its truth label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Joined {
    pub participant_id: String,
    pub truth: IntensityClass,
    pub predicted: IntensityClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantMetrics {
    pub participant_id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Metrics per participant, ordered by id. Pairs with a class outside
/// SB/LIPA/MVPA on either side are skipped.
pub fn per_participant(records: &[Joined]) -> Vec<ParticipantMetrics> {
    let mut matrices: BTreeMap<&str, ConfusionMatrix> = BTreeMap::new();
    for r in records {
        let m = matrices.entry(r.participant_id.as_str()).or_default();
        let _ = m.add(r.truth, r.predicted);
    }
    matrices
        .into_iter()
        .map(|(pid, m)| ParticipantMetrics { participant_id: pid.to_string(), metrics: class_metrics(&m) })
        .collect()
}

pub use crate::stats::quartile_summary;

/// Five-number summaries of the per-participant metrics; undefined values
/// are dropped and `n` counts what remains.
pub fn summaries(per: &[ParticipantMetrics]) -> BTreeMap<String, Option<QuartileSummary>> {
    let mut out = BTreeMap::new();
    out.insert("kappa".to_string(), summarise_defined(per.iter().map(|p| p.metrics.kappa)));
    out.insert("accuracy".to_string(), summarise_defined(per.iter().map(|p| p.metrics.accuracy)));
    out.insert("macro_recall".to_string(), summarise_defined(per.iter().map(|p| p.metrics.macro_recall)));
    for (i, class) in IntensityClass::EVALUATED.iter().enumerate() {
        let pick = |f: fn(&ClassMetrics) -> Option<f64>| summarise_defined(per.iter().map(|p| f(p.metrics.per_class.by_index(i))));
        out.insert(format!("f1.{class}"), pick(|c| c.f1));
        out.insert(format!("precision.{class}"), pick(|c| c.precision));
        out.insert(format!("recall.{class}"), pick(|c| c.recall));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub run_ids: BTreeSet<String>,
    pub n_predictions: usize,
    pub n_evaluated: u64,
    /// Items whose prediction failed.
    pub n_failed: usize,
    /// Predictions outside SB/LIPA/MVPA, e.g. abstentions.
    pub n_abstained: usize,
    /// Truth labels outside SB/LIPA/MVPA (Sleep, Unknown).
    pub n_excluded_truth: usize,
    pub n_truth_overrides: usize,
    pub unmatched: Vec<String>,
    pub unmatched_fraction: f64,
    pub pooled: Metrics,
    pub per_participant: Vec<ParticipantMetrics>,
    pub summaries: BTreeMap<String, Option<QuartileSummary>>,
}

impl EvalReport {
    pub fn median_kappa(&self) -> Option<f64> {
        self.summaries.get("kappa").copied().flatten().map(|s| s.median)
    }

    pub fn too_many_unmatched(&self) -> bool {
        self.unmatched_fraction > MAX_UNMATCHED_FRACTION
    }
}

/// Joins predictions to truth by image id. `truth_overrides` replaces the
/// dataset label for the given image ids (review corrections).
pub fn report(
    truth: &Dataset,
    predictions: &[PredictionRecord],
    truth_overrides: &BTreeMap<String, IntensityClass>,
) -> EvalReport {
    let index = truth.index_by_image_id();
    let mut joined = Vec::new();
    let mut unmatched = Vec::new();
    let (mut n_failed, mut n_abstained, mut n_excluded_truth, mut n_truth_overrides) = (0, 0, 0, 0);
    let mut run_ids = BTreeSet::new();
    for p in predictions {
        run_ids.insert(p.run_id.clone());
        let Some(rec) = index.get(&p.image_id) else {
            unmatched.push(p.image_id.clone());
            continue;
        };
        let Some(predicted) = p.predicted.filter(|_| p.is_ok()) else {
            n_failed += 1;
            continue;
        };
        let label = match truth_overrides.get(&p.image_id) {
            Some(c) => {
                n_truth_overrides += 1;
                *c
            }
            None => rec.intensity,
        };
        if label.eval_index().is_none() {
            n_excluded_truth += 1;
        } else if predicted.eval_index().is_none() {
            n_abstained += 1;
        } else {
            joined.push(Joined { participant_id: rec.participant_id.clone(), truth: label, predicted });
        }
    }
    unmatched.sort();
    unmatched.dedup();
    let per = per_participant(&joined);
    let mut pooled = ConfusionMatrix::default();
    for p in &per {
        pooled.merge(&p.metrics.confusion);
    }
    let unmatched_fraction =
        if predictions.is_empty() { 0.0 } else { unmatched.len() as f64 / predictions.len() as f64 };
    EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        run_ids,
        n_predictions: predictions.len(),
        n_evaluated: pooled.total(),
        n_failed,
        n_abstained,
        n_excluded_truth,
        n_truth_overrides,
        unmatched,
        unmatched_fraction,
        pooled: class_metrics(&pooled),
        summaries: summaries(&per),
        per_participant: per,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `per_participant_f1.csv` and `kappa.csv`. Undefined
/// values are empty CSV cells.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    let json = out_dir.join("report.json");
    write_atomic(&json, &to_json_bytes(report)?).map_err(io_err(&json))?;

    let mut f1 = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    f1.write_record(["participant_id", "class", "f1"])?;
    let mut kappa = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    kappa.write_record(["participant_id", "kappa"])?;
    for p in &report.per_participant {
        for (i, class) in IntensityClass::EVALUATED.iter().enumerate() {
            f1.write_record([p.participant_id.as_str(), class.as_str(), &fmt_opt(p.metrics.per_class.by_index(i).f1)])?;
        }
        kappa.write_record([p.participant_id.as_str(), &fmt_opt(p.metrics.kappa)])?;
    }
    for (name, w) in [("per_participant_f1.csv", f1), ("kappa.csv", kappa)] {
        let bytes = w.into_inner().map_err(|e| EvalError::Io { path: name.into(), source: e.into_error() })?;
        let path = out_dir.join(name);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let bytes = std::fs::read(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_slice(&bytes)?)
}
