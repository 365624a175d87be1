//! Per-class precision, recall and F1, and the single- vs multi-head
//! comparison harness.

mod experiment;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experiment::{
    desk_model, experiment_preset, run_comparison_experiment, run_comparison_on, CellOutcome, CellResult, DataSpec,
    ExperimentPreset, ExperimentReport, ExperimentSpec, ModelSpec, ReportRow, SummaryCell, EXPERIMENT_PRESETS,
};

use crate::dataset::{Dataset, LabelVocabulary};
use crate::model::{Model, ModelError, Thresholds};
use crate::record::{stack_records, LabelSet};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("class {0:?} is not in the dataset vocabulary")]
    UnknownClass(String),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<String>,
    pub counts: Vec<ClassCounts>,
}

/// Per-class binary counting over aligned prediction and truth sets.
pub fn confusion_counts(
    predictions: &[LabelSet],
    truths: &[LabelSet],
    vocab: &LabelVocabulary,
) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let mut counts = vec![ClassCounts::default(); vocab.len()];
    for (p, t) in predictions.iter().zip(truths) {
        for (c, k) in counts.iter_mut().enumerate() {
            match (p.contains(c), t.contains(c)) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        classes: vocab.names().to_vec(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Positive examples in the evaluated set.
    pub support: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<ClassMetrics>,
}

impl MetricsTable {
    pub fn get(&self, class: &str) -> Option<&ClassMetrics> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn f1(&self, class: &str) -> Option<f64> {
        self.get(class).map(|r| r.f1)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}\n", "class", "support", "prec", "recall", "f1");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>9}  {:>6.3}  {:>6.3}  {:>6.3}\n",
                r.class, r.support, r.precision, r.recall, r.f1
            ));
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of two rates, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 per class; every degenerate ratio is 0.
pub fn f1_from_counts(counts: &ConfusionCounts) -> MetricsTable {
    MetricsTable {
        rows: counts
            .classes
            .iter()
            .zip(&counts.counts)
            .map(|(class, k)| {
                let precision = ratio(k.tp, k.tp + k.fp);
                let recall = ratio(k.tp, k.tp + k.fn_);
                ClassMetrics {
                    class: class.clone(),
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support: k.tp + k.fn_,
                }
            })
            .collect(),
    }
}

const EVAL_BATCH: usize = 32;

/// Sigmoid scores `[record][head]` in dataset order, from eval-mode passes.
pub fn score_dataset<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut scores = Vec::with_capacity(ds.len());
    for chunk in ds.records().chunks(EVAL_BATCH) {
        let batch = stack_records::<T>(chunk.iter().map(|r| &**r)).expect("chunks are nonempty");
        scores.extend(model.predict_scores(&batch)?);
    }
    Ok(scores)
}

/// Vocabulary indices of the model's heads.
pub fn head_classes<T: Scalar>(model: &Model<T>, vocab: &LabelVocabulary) -> Result<Vec<usize>> {
    model
        .head_names()
        .iter()
        .map(|h| vocab.index_of(h).ok_or_else(|| MetricsError::UnknownClass(h.clone())))
        .collect()
}

/// Metrics from precomputed scores; one row per head, in head order.
pub fn metrics_from_scores(
    scores: &[Vec<f64>],
    ds: &Dataset,
    heads: &[String],
    classes: &[usize],
    cut: &[f64],
) -> Result<MetricsTable> {
    let sub = LabelVocabulary::new(
        heads
            .iter()
            .map(|h| crate::dataset::ClassEntry {
                name: h.clone(),
                synonyms: Vec::new(),
            })
            .collect(),
    )
    .expect("model heads are unique");
    let predictions: Vec<LabelSet> = scores
        .iter()
        .map(|row| (0..heads.len()).filter(|&h| row[h] > cut[h]).collect())
        .collect();
    let truths: Vec<LabelSet> = ds
        .records()
        .iter()
        .map(|r| (0..heads.len()).filter(|&h| r.labels.contains(classes[h])).collect())
        .collect();
    Ok(f1_from_counts(&confusion_counts(&predictions, &truths, &sub)?))
}

/// Eval-mode metrics over a dataset for the classes the model has heads for.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, ds: &Dataset, thresholds: &Thresholds) -> Result<MetricsTable> {
    if ds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let classes = head_classes(model, ds.vocabulary())?;
    let cut = thresholds.resolve(model.head_names())?;
    let scores = score_dataset(model, ds)?;
    metrics_from_scores(&scores, ds, model.head_names(), &classes, &cut)
}

/// Per-head threshold maximizing F1 on `ds`, searched over the observed
/// scores. Heads with no positives keep the default.
pub fn tune_thresholds<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<Thresholds> {
    if ds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let classes = head_classes(model, ds.vocabulary())?;
    let scores = score_dataset(model, ds)?;
    let mut out = Thresholds::default();
    for (h, name) in model.head_names().iter().enumerate() {
        let mut pairs: Vec<(f64, bool)> = scores
            .iter()
            .zip(ds.records())
            .map(|(s, r)| (s[h], r.labels.contains(classes[h])))
            .collect();
        let positives = pairs.iter().filter(|p| p.1).count() as u64;
        if positives == 0 {
            continue;
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut best = (0.0, Thresholds::DEFAULT);
        for (i, &(score, positive)) in pairs.iter().enumerate() {
            if positive {
                tp += 1;
            } else {
                fp += 1;
            }
            // cut between this score and the next lower one
            if pairs.get(i + 1).is_some_and(|n| n.0 == score) {
                continue;
            }
            let f1 = f1_score(ratio(tp, tp + fp), ratio(tp, positives));
            let next = pairs.get(i + 1).map_or(0.0, |n| n.0);
            let t = ((score + next) / 2.0).clamp(1e-6, 1.0 - 1e-6);
            if f1 > best.0 {
                best = (f1, t);
            }
        }
        out.0.insert(name.clone(), best.1);
    }
    Ok(out)
}

/// Accuracy and ROC AUC per head. Diagnostic only; these are misleading
/// under class imbalance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub class: String,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
}

pub fn diagnostics<T: Scalar>(model: &Model<T>, ds: &Dataset, thresholds: &Thresholds) -> Result<Vec<Diagnostics>> {
    if ds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let classes = head_classes(model, ds.vocabulary())?;
    let cut = thresholds.resolve(model.head_names())?;
    let scores = score_dataset(model, ds)?;
    Ok(model
        .head_names()
        .iter()
        .enumerate()
        .map(|(h, name)| {
            let pairs: Vec<(f64, bool)> = scores
                .iter()
                .zip(ds.records())
                .map(|(s, r)| (s[h], r.labels.contains(classes[h])))
                .collect();
            let correct = pairs.iter().filter(|(s, y)| (*s > cut[h]) == *y).count();
            Diagnostics {
                class: name.clone(),
                accuracy: correct as f64 / pairs.len() as f64,
                roc_auc: roc_auc(&pairs),
            }
        })
        .collect())
}

/// Mann-Whitney form of the area under the ROC curve, ties counted half.
fn roc_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}
