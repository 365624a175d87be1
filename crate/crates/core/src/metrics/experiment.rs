use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, MetricsError, MetricsTable, Result};
use crate::dataset::{class, resample_dataset, split_dataset, Dataset, LabelVocabulary, ResampleConfig, TABLE1_CLASSES};
use crate::model::{Model, ModelConfig, Thresholds};
use crate::rng;
use crate::synth::{generate_dataset, ClassMix, NoiseConfig};
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub heads: Vec<String>,
}

impl ModelSpec {
    pub fn new<S: Into<String>>(name: impl Into<String>, heads: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            heads: heads.into_iter().map(Into::into).collect(),
        }
    }
}

/// Synthetic corpus shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub mix: ClassMix,
    pub records: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
    /// Applied to the training split only.
    pub resample: Option<ResampleConfig>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            mix: ClassMix::preset("table1").expect("built-in preset"),
            records: 41_522,
            seed: 0,
            noise: NoiseConfig::default(),
            split: (0.8, 0.1, 0.1),
            resample: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSpec,
    /// Trunk shape shared by every model; heads come from `models`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub models: Vec<ModelSpec>,
    /// Classes reported as rows, in order.
    pub classes: Vec<String>,
    pub repetitions: usize,
    /// Repetition `r` of every model uses the same derived seed, so models
    /// differ only in their heads.
    pub seed: u64,
    /// Cells trained concurrently.
    pub threads: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            data: DataSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            models: Vec::new(),
            classes: Vec::new(),
            repetitions: 1,
            seed: 0,
            threads: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        let bad = |m: String| Err(MetricsError::Spec(m));
        if self.models.is_empty() {
            return bad("no models".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return bad(format!("duplicate model name {:?}", m.name));
            }
            if m.heads.is_empty() {
                return bad(format!("model {:?} has no heads", m.name));
            }
        }
        for c in self.models.iter().flat_map(|m| &m.heads).chain(&self.classes) {
            if vocab.index_of(c).is_none() {
                return Err(MetricsError::UnknownClass(c.clone()));
            }
        }
        self.model
            .clone()
            .with_heads(self.models[0].heads.clone())
            .validate()
            .map_err(MetricsError::Model)?;
        self.train
            .validate()
            .map_err(|e| MetricsError::Spec(e.to_string()))
    }

    /// Report rows: `classes` when given, otherwise every head in model order.
    pub fn row_classes(&self) -> Vec<String> {
        if !self.classes.is_empty() {
            return self.classes.clone();
        }
        let mut out: Vec<String> = Vec::new();
        for h in self.models.iter().flat_map(|m| &m.heads) {
            if !out.contains(h) {
                out.push(h.clone());
            }
        }
        out
    }

    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        rng::mix(rng::mix(self.seed, rng::domain::EXPERIMENT), repetition as u64)
    }
}

/// Named, ready-made experiment definitions.
pub trait ExperimentPreset: Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn spec(&self) -> ExperimentSpec;
}

fn table1_models() -> Vec<ModelSpec> {
    let mut models: Vec<ModelSpec> = [
        class::COMPLETE_HEART_BLOCK,
        class::AVNRT,
        class::MOBITZ_I,
        class::ATRIAL_FIBRILLATION,
        class::ECTOPIC_ATRIAL_RHYTHM,
    ]
    .into_iter()
    .map(|c| ModelSpec::new(format!("single:{c}"), [c]))
    .collect();
    models.push(ModelSpec::new("A", [class::MOBITZ_I, class::FIRST_DEGREE_AVB]));
    models.push(ModelSpec::new("B", TABLE1_CLASSES.iter().map(|(c, _)| *c)));
    models
}

fn table1_rows() -> Vec<String> {
    TABLE1_CLASSES.iter().map(|(c, _)| c.to_string()).collect()
}

/// Narrow trunk for desk-scale runs: same depth and pooling schedule, 8
/// base channels capped at 32.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        channel_cap: Some(32),
        ..ModelConfig::default()
    }
}

struct Table1;
struct Table1Desk;
struct MultitaskDesk;

impl ExperimentPreset for Table1 {
    fn name(&self) -> &'static str {
        "table1"
    }

    fn summary(&self) -> &'static str {
        "full scale: 41,522 records, full model, 96 epochs, five single-head models plus A and B"
    }

    fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: self.name().into(),
            data: DataSpec {
                resample: Some(ResampleConfig::default()),
                ..DataSpec::default()
            },
            models: table1_models(),
            classes: table1_rows(),
            ..ExperimentSpec::default()
        }
    }
}

impl ExperimentPreset for Table1Desk {
    fn name(&self) -> &'static str {
        "table1-desk"
    }

    fn summary(&self) -> &'static str {
        "desk-scale table1 layout: 2,000 records, narrow model, 4 epochs"
    }

    fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: self.name().into(),
            data: DataSpec {
                records: 2000,
                ..DataSpec::default()
            },
            model: desk_model(),
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            models: table1_models(),
            classes: table1_rows(),
            ..ExperimentSpec::default()
        }
    }
}

impl ExperimentPreset for MultitaskDesk {
    fn name(&self) -> &'static str {
        "multitask-desk"
    }

    fn summary(&self) -> &'static str {
        "rare Mobitz I (~150 positives) with common 1st-degree AV block (~1,500) in 8,000 records; \
         single-head models vs the two-head model A, 3 seeds, 2 epochs"
    }

    fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: self.name().into(),
            data: DataSpec {
                mix: ClassMix::preset("multitask-desk").expect("built-in preset"),
                records: 8000,
                split: (0.7, 0.1, 0.2),
                ..DataSpec::default()
            },
            model: desk_model(),
            // a short budget: both models converge to the same F1 by epoch 4
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            models: vec![
                ModelSpec::new(format!("single:{}", class::MOBITZ_I), [class::MOBITZ_I]),
                ModelSpec::new(format!("single:{}", class::FIRST_DEGREE_AVB), [class::FIRST_DEGREE_AVB]),
                ModelSpec::new("A", [class::MOBITZ_I, class::FIRST_DEGREE_AVB]),
            ],
            classes: vec![class::MOBITZ_I.into(), class::FIRST_DEGREE_AVB.into()],
            repetitions: 3,
            ..ExperimentSpec::default()
        }
    }
}

pub static EXPERIMENT_PRESETS: &[&dyn ExperimentPreset] = &[&Table1, &Table1Desk, &MultitaskDesk];

pub fn experiment_preset(name: &str) -> Result<ExperimentSpec> {
    EXPERIMENT_PRESETS
        .iter()
        .find(|p| p.name() == name)
        .map(|p| p.spec())
        .ok_or_else(|| MetricsError::Spec(format!("unknown experiment preset {name:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok { final_loss: f64, metrics: MetricsTable },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub repetition: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

/// Mean and range of one model's F1 on one class across repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub mean_f1: Option<f64>,
    pub min_f1: Option<f64>,
    pub max_f1: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub support: usize,
    /// One entry per model, `None` where the model has no head for the class.
    pub cells: Vec<Option<SummaryCell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub split_sizes: [usize; 3],
    pub models: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn summary(&self, model: &str, class: &str) -> Option<&SummaryCell> {
        let m = self.models.iter().position(|n| n == model)?;
        self.rows.iter().find(|r| r.class == class)?.cells[m].as_ref()
    }

    /// Per-repetition F1 of one model on one class; failed cells are `None`.
    pub fn f1_by_repetition(&self, model: &str, class: &str) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .filter(|c| c.model == model)
            .map(|c| match &c.outcome {
                CellOutcome::Ok { metrics, .. } => metrics.f1(class),
                CellOutcome::Failed { .. } => None,
            })
            .collect()
    }

    /// The lone metrics table of a one-model, one-repetition run.
    pub fn single_table(&self) -> Option<&MetricsTable> {
        match self.cells.as_slice() {
            [CellResult {
                outcome: CellOutcome::Ok { metrics, .. },
                ..
            }] => Some(metrics),
            _ => None,
        }
    }

    /// Rows are classes with support, columns are models; each cell shows the
    /// mean F1 with the min-max range across repetitions, `*` marks the best
    /// mean in a row and `FAILED` a cell whose runs all failed.
    pub fn to_text(&self) -> String {
        let class_w = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        let cell = |c: &Option<SummaryCell>| -> String {
            match c {
                None => "-".into(),
                Some(s) => match (s.mean_f1, s.min_f1, s.max_f1) {
                    (Some(mean), Some(lo), Some(hi)) => {
                        let star = if s.best { "*" } else { "" };
                        let failed = if s.failed > 0 { format!(" ({} failed)", s.failed) } else { String::new() };
                        if self.spec.repetitions > 1 {
                            format!("{mean:.3}{star} [{lo:.3},{hi:.3}]{failed}")
                        } else {
                            format!("{mean:.3}{star}{failed}")
                        }
                    }
                    _ => "FAILED".into(),
                },
            }
        };
        let rendered: Vec<Vec<String>> = self.rows.iter().map(|r| r.cells.iter().map(cell).collect()).collect();
        let widths: Vec<usize> = self
            .models
            .iter()
            .enumerate()
            .map(|(m, name)| rendered.iter().map(|r| r[m].len()).chain([name.len()]).max().unwrap_or(1))
            .collect();
        let mut out = format!("experiment {} ({} repetition(s))\n", self.spec.name, self.spec.repetitions);
        out.push_str(&format!("{:<class_w$}  {:>7}", "class", "support"));
        for (name, w) in self.models.iter().zip(&widths) {
            out.push_str(&format!("  {name:>w$}"));
        }
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(&rendered) {
            out.push_str(&format!("{:<class_w$}  {:>7}", row.class, row.support));
            for (c, w) in cells.iter().zip(&widths) {
                out.push_str(&format!("  {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Generates the corpus, splits it, and runs every (model, repetition) cell.
pub fn run_comparison_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let ds = generate_dataset(&spec.data.mix, spec.data.records, spec.data.seed, &spec.data.noise)
        .map_err(|e| MetricsError::Spec(format!("data generation: {e}")))?;
    let (train, val, test) =
        split_dataset(&ds, spec.data.split, spec.data.seed).map_err(|e| MetricsError::Spec(e.to_string()))?;
    let train = match &spec.data.resample {
        Some(r) => resample_dataset(&train, r).map_err(|e| MetricsError::Spec(e.to_string()))?,
        None => train,
    };
    run_comparison_on(spec, &train, &val, &test, |_| {})
}

/// Runs the cells on prepared splits; `progress` sees each finished cell.
pub fn run_comparison_on(
    spec: &ExperimentSpec,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    progress: impl Fn(&CellResult) + Sync,
) -> Result<ExperimentReport> {
    spec.validate(train.vocabulary())?;
    if test.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let jobs: Vec<(usize, usize)> = (0..spec.repetitions)
        .flat_map(|r| (0..spec.models.len()).map(move |m| (m, r)))
        .collect();
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(m, r)) = jobs.get(i) else { break };
        let seed = spec.repetition_seed(r);
        let outcome = match run_cell(spec, &spec.models[m], seed, train, val, test) {
            Ok((final_loss, metrics)) => CellOutcome::Ok { final_loss, metrics },
            Err(error) => CellOutcome::Failed { error },
        };
        let cell = CellResult {
            model: spec.models[m].name.clone(),
            repetition: r,
            seed,
            outcome,
        };
        progress(&cell);
        slots.lock().expect("no poisoned workers")[i] = Some(cell);
    };
    std::thread::scope(|s| {
        for _ in 1..spec.threads.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let mut cells: Vec<CellResult> = slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    cells.sort_by_key(|c| {
        let m = spec.models.iter().position(|s| s.name == c.model).expect("known model");
        (m, c.repetition)
    });
    Ok(summarize(spec, test, [train.len(), val.len(), test.len()], cells))
}

fn run_cell(
    spec: &ExperimentSpec,
    model_spec: &ModelSpec,
    seed: u64,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> std::result::Result<(f64, MetricsTable), String> {
    let config = spec.model.clone().with_heads(model_spec.heads.clone());
    let model = Model::<f32>::build(config, seed).map_err(|e| e.to_string())?;
    let train_config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let mut trainer = Trainer::new(model, train_config).map_err(|e| e.to_string())?;
    let val = (!val.is_empty()).then_some(val);
    trainer.train(train, val).map_err(|e| e.to_string())?;
    let final_loss = trainer.history().epoch_losses.last().copied().unwrap_or(f64::NAN);
    let metrics = evaluate_model(trainer.model(), test, &Thresholds::default()).map_err(|e| e.to_string())?;
    Ok((final_loss, metrics))
}

fn summarize(spec: &ExperimentSpec, test: &Dataset, split_sizes: [usize; 3], cells: Vec<CellResult>) -> ExperimentReport {
    let models: Vec<String> = spec.models.iter().map(|m| m.name.clone()).collect();
    let rows = spec
        .row_classes()
        .into_iter()
        .map(|class| {
            let support = test.count_of(&class).unwrap_or(0);
            let mut row: Vec<Option<SummaryCell>> = spec
                .models
                .iter()
                .map(|m| {
                    if !m.heads.contains(&class) {
                        return None;
                    }
                    let mine: Vec<&CellResult> = cells.iter().filter(|c| c.model == m.name).collect();
                    let f1s: Vec<f64> = mine
                        .iter()
                        .filter_map(|c| match &c.outcome {
                            CellOutcome::Ok { metrics, .. } => metrics.f1(&class),
                            CellOutcome::Failed { .. } => None,
                        })
                        .collect();
                    let n = f1s.len();
                    Some(SummaryCell {
                        mean_f1: (n > 0).then(|| f1s.iter().sum::<f64>() / n as f64),
                        min_f1: f1s.iter().copied().reduce(f64::min),
                        max_f1: f1s.iter().copied().reduce(f64::max),
                        succeeded: n,
                        failed: mine.len() - n,
                        best: false,
                    })
                })
                .collect();
            let best = row
                .iter()
                .filter_map(|c| c.as_ref().and_then(|c| c.mean_f1))
                .reduce(f64::max);
            if let Some(best) = best {
                for c in row.iter_mut().flatten() {
                    c.best = c.mean_f1 == Some(best);
                }
            }
            ReportRow {
                class,
                support,
                cells: row,
            }
        })
        .collect();
    ExperimentReport {
        spec: spec.clone(),
        split_sizes,
        models,
        rows,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        let vocab = LabelVocabulary::standard();
        for p in EXPERIMENT_PRESETS {
            p.spec().validate(&vocab).unwrap_or_else(|e| panic!("{}: {e}", p.name()));
        }
        assert!(experiment_preset("nope").is_err());
    }

    #[test]
    fn table1_layout() {
        let s = experiment_preset("table1").unwrap();
        assert_eq!(s.row_classes().len(), 12);
        let a = s.models.iter().find(|m| m.name == "A").unwrap();
        assert_eq!(a.heads, vec![class::MOBITZ_I, class::FIRST_DEGREE_AVB]);
        assert_eq!(s.models.len(), 7);
    }

    #[test]
    fn model_a_column_only_has_its_heads() {
        let spec = experiment_preset("table1").unwrap();
        let cells = vec![CellResult {
            model: "A".into(),
            repetition: 0,
            seed: 0,
            outcome: CellOutcome::Failed { error: "x".into() },
        }];
        let test = crate::dataset::testing::tagged(&[crate::record::LabelSet::empty()]);
        let report = summarize(&spec, &test, [0, 0, 1], cells);
        let a = report.models.iter().position(|m| m == "A").unwrap();
        let populated: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.cells[a].is_some())
            .map(|r| r.class.as_str())
            .collect();
        assert_eq!(populated, vec![class::MOBITZ_I, class::FIRST_DEGREE_AVB]);
        let s = report.summary("A", class::MOBITZ_I).unwrap();
        assert_eq!((s.failed, s.mean_f1), (1, None));
        assert!(report.to_text().contains("FAILED"));
    }
}
