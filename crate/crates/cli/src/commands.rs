use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use ecgnet::dataset::{load_dataset, resample_dataset, save_dataset, split_dataset, Dataset, DatasetPaths, ResampleConfig};
use ecgnet::metrics::{
    self, diagnostics, evaluate_model, experiment_preset, run_comparison_on, tune_thresholds, ExperimentSpec,
    EXPERIMENT_PRESETS,
};
use ecgnet::model::{Model, ModelConfig, Thresholds};
use ecgnet::synth::{generate_dataset, ClassMix, NoiseConfig};
use ecgnet::train::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};

use crate::config::{Kind, Overrides, RunConfig, Schema};
use crate::{CliError, Context, Result};

/// One subcommand: its configuration schema and what it does.
pub trait Command: Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn schema(&self, ctx: &Context, overrides: &Overrides) -> Result<Schema>;
    /// The seed that governs the run, for the log.
    fn seed(&self, cfg: &RunConfig) -> Option<u64> {
        cfg.get("seed").ok()
    }
    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()>;
}

pub static COMMANDS: &[&dyn Command] = &[&Synth, &Resample, &Split, &Train, &Eval, &Experiment, &Predict];

pub fn command(name: &str) -> Option<&'static dyn Command> {
    COMMANDS.iter().copied().find(|c| c.name() == name)
}

fn open_dataset(key: &str, cfg: &RunConfig) -> Result<Dataset> {
    let base = cfg.str(key).ok_or_else(|| CliError::MissingInput(format!("`{key}` is not set")))?;
    let paths = DatasetPaths::from_base(base);
    for p in [&paths.records, &paths.manifest] {
        if !p.exists() {
            return Err(CliError::MissingInput(p.display().to_string()));
        }
    }
    Ok(load_dataset(base)?)
}

fn open_checkpoint(cfg: &RunConfig) -> Result<Checkpoint<f32>> {
    let path = cfg.str("checkpoint").expect("required key");
    if !Path::new(path).exists() {
        return Err(CliError::MissingInput(path.into()));
    }
    Ok(load_checkpoint(path)?)
}

/// Every model head must name a class of the dataset.
fn check_heads(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    let missing: Vec<&str> = model
        .head_names()
        .iter()
        .filter(|h| ds.vocabulary().index_of(h).is_none())
        .map(String::as_str)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Vocabulary(format!(
            "checkpoint heads {missing:?} are not in the dataset vocabulary {:?}",
            ds.vocabulary().names()
        )))
    }
}

fn out_path(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.str("out").expect("out has a default"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    write_file(path, s)
}

fn save(ds: &Dataset, base: &Path, ctx: &mut Context) -> Result<()> {
    create_parent(base)?;
    let paths = save_dataset(ds, base)?;
    ctx.log(format_args!(
        "wrote {} records to {} (+ {})",
        ds.len(),
        paths.records.display(),
        paths.manifest.display()
    ));
    Ok(())
}

struct Synth;

impl Command for Synth {
    fn name(&self) -> &'static str {
        "synth"
    }

    fn about(&self) -> &'static str {
        "generate a labeled synthetic dataset from a class mix"
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .value("records", 2000, Kind::Integer)
            .value("seed", 0, Kind::Integer)
            .value("mix", "table1", Kind::Any)
            .section("noise", &NoiseConfig::default(), &[])
            .value("out", ctx.out_dir.join("synth"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let mix = match cfg.raw("mix") {
            Value::String(name) => ClassMix::preset(name)?,
            v => serde_json::from_value(v.clone()).map_err(|e| CliError::Config(crate::config::ConfigError::Invalid {
                key: "mix".into(),
                detail: e.to_string(),
            }))?,
        };
        let noise: NoiseConfig = cfg.section("noise", &[])?;
        let ds = generate_dataset(&mix, cfg.get("records")?, cfg.get("seed")?, &noise)?;
        for (name, count) in ds.vocabulary().names().iter().zip(ds.class_counts()) {
            ctx.log(format_args!("  {name:<26} {count}"));
        }
        save(&ds, &out_path(cfg), ctx)
    }
}

struct Resample;

impl Command for Resample {
    fn name(&self) -> &'static str {
        "resample"
    }

    fn about(&self) -> &'static str {
        "minority-first class balancing without replacement"
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .required("input")
            .section("", &ResampleConfig::default(), &[])
            .value("out", ctx.out_dir.join("resampled"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let ds = open_dataset("input", cfg)?;
        let rc: ResampleConfig = cfg.section("", &["input", "out"])?;
        let out = resample_dataset(&ds, &rc)?;
        ctx.log(format_args!("kept {} of {} records", out.len(), ds.len()));
        save(&out, &out_path(cfg), ctx)
    }
}

struct Split;

impl Command for Split {
    fn name(&self) -> &'static str {
        "split"
    }

    fn about(&self) -> &'static str {
        "seeded train/validation/test partition (writes <out>.train, <out>.val, <out>.test)"
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .required("input")
            .value("fractions", [0.8, 0.1, 0.1], Kind::List)
            .value("seed", 0, Kind::Integer)
            .value("out", ctx.out_dir.join("split"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let ds = open_dataset("input", cfg)?;
        let (train, val, test) = split_dataset(&ds, cfg.get("fractions")?, cfg.get("seed")?)?;
        let base = out_path(cfg).into_os_string();
        for (part, name) in [(&train, ".train"), (&val, ".val"), (&test, ".test")] {
            let mut p = base.clone();
            p.push(name);
            save(part, Path::new(&p), ctx)?;
        }
        Ok(())
    }
}

struct Train;

impl Command for Train {
    fn name(&self) -> &'static str {
        "train"
    }

    fn about(&self) -> &'static str {
        "train a model; writes <out>/model.ckpt after every epoch and <out>/history.json"
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .required("train_data")
            .optional("val_data")
            .optional("resume")
            .section("", &TrainConfig::default(), &[])
            .section("model", &ModelConfig::default(), &[])
            .value("out", ctx.out_dir.join("train"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let train = open_dataset("train_data", cfg)?;
        let val = match cfg.str("val_data") {
            Some(_) => Some(open_dataset("val_data", cfg)?),
            None => None,
        };
        let tc: TrainConfig = cfg.section("", &["train_data", "val_data", "resume", "model", "out"])?;
        let mut trainer = match cfg.str("resume") {
            Some(path) => {
                if !Path::new(path).exists() {
                    return Err(CliError::MissingInput(path.into()));
                }
                let ck = load_checkpoint::<f32>(path)?;
                ctx.log(format_args!(
                    "resuming {path} after epoch {} (model.* keys come from the checkpoint)",
                    ck.history.epochs()
                ));
                Trainer::resume(ck, Some(tc))?
            }
            None => {
                let mc: ModelConfig = cfg.section("model", &[])?;
                Trainer::new(Model::build(mc, tc.seed)?, tc)?
            }
        };
        check_heads(trainer.model(), &train)?;
        let out = out_path(cfg);
        create_dir(&out)?;
        let ckpt = out.join("model.ckpt");
        ctx.log(format_args!(
            "{} parameters, {} heads, {} training records",
            trainer.model().num_parameters(),
            trainer.model().head_names().len(),
            train.len()
        ));
        while trainer.epochs_done() < trainer.config().epochs {
            trainer.train_for(1, &train, val.as_ref())?;
            let h = trainer.history();
            ctx.log(format_args!(
                "epoch {:>3}  loss {:.5}  ce {:.5}",
                h.epochs(),
                h.epoch_losses.last().expect("epoch ran"),
                h.epoch_ce.last().expect("epoch ran")
            ));
            save_checkpoint(&ckpt, &trainer.checkpoint())?;
        }
        write_json(&out.join("history.json"), trainer.history())?;
        ctx.log(format_args!("wrote {} and history.json", ckpt.display()));
        Ok(())
    }
}

struct Eval;

impl Command for Eval {
    fn name(&self) -> &'static str {
        "eval"
    }

    fn about(&self) -> &'static str {
        "per-class precision/recall/F1 of a checkpoint on a dataset"
    }

    fn seed(&self, _: &RunConfig) -> Option<u64> {
        None
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .required("checkpoint")
            .required("data")
            .value("thresholds", Thresholds::default(), Kind::Object)
            .optional("tune_thresholds_on")
            .value("diagnostics", false, Kind::Bool)
            .value("out", ctx.out_dir.join("eval"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let ck = open_checkpoint(cfg)?;
        let ds = open_dataset("data", cfg)?;
        check_heads(&ck.model, &ds)?;
        let thresholds = match cfg.str("tune_thresholds_on") {
            Some(_) => {
                let val = open_dataset("tune_thresholds_on", cfg)?;
                check_heads(&ck.model, &val)?;
                tune_thresholds(&ck.model, &val)?
            }
            None => cfg.get("thresholds")?,
        };
        let table = evaluate_model(&ck.model, &ds, &thresholds)?;
        let diag = if cfg.get("diagnostics")? {
            Some(diagnostics(&ck.model, &ds, &thresholds)?)
        } else {
            None
        };
        #[derive(Serialize)]
        struct Report<'a> {
            records: usize,
            thresholds: &'a Thresholds,
            metrics: &'a metrics::MetricsTable,
            #[serde(skip_serializing_if = "Option::is_none")]
            diagnostics: Option<Vec<metrics::Diagnostics>>,
        }
        let out = out_path(cfg);
        write_json(
            &out.join("metrics.json"),
            &Report {
                records: ds.len(),
                thresholds: &thresholds,
                metrics: &table,
                diagnostics: diag,
            },
        )?;
        write_file(&out.join("metrics.txt"), table.to_text())?;
        ctx.log(format_args!("{}", table.to_text().trim_end()));
        Ok(())
    }
}

struct Experiment;

impl Command for Experiment {
    fn name(&self) -> &'static str {
        "experiment"
    }

    fn about(&self) -> &'static str {
        "single-head vs multi-head comparison; presets: table1, table1-desk, multitask-desk"
    }

    fn schema(&self, ctx: &Context, overrides: &Overrides) -> Result<Schema> {
        let preset = match overrides.peek("preset") {
            None => "multitask-desk".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => {
                return Err(CliError::Config(crate::config::ConfigError::TypeMismatch {
                    key: "preset".into(),
                    expected: "a string",
                    got: other.to_string(),
                }))
            }
        };
        let spec = experiment_preset(&preset).map_err(|_| {
            let known: Vec<&str> = EXPERIMENT_PRESETS.iter().map(|p| p.name()).collect();
            CliError::Config(crate::config::ConfigError::Invalid {
                key: "preset".into(),
                detail: format!("unknown preset {preset:?}; known: {known:?}"),
            })
        })?;
        Ok(Schema::default()
            .value("preset", &preset, Kind::String)
            .section("", &spec, &["data.mix", "data.resample"])
            .value("out", ctx.out_dir.join("experiment"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let spec: ExperimentSpec = cfg.section("", &["preset", "out"])?;
        let d = &spec.data;
        let ds = generate_dataset(&d.mix, d.records, d.seed, &d.noise)?;
        let (train, val, test) = split_dataset(&ds, d.split, d.seed)?;
        let train = match &d.resample {
            Some(r) => resample_dataset(&train, r)?,
            None => train,
        };
        ctx.log(format_args!(
            "{} cells; split {} / {} / {}",
            spec.models.len() * spec.repetitions,
            train.len(),
            val.len(),
            test.len()
        ));
        let log = std::sync::Mutex::new(&mut *ctx);
        let report = run_comparison_on(&spec, &train, &val, &test, |cell| {
            let status = match &cell.outcome {
                metrics::CellOutcome::Ok { final_loss, .. } => format!("ok, final loss {final_loss:.5}"),
                metrics::CellOutcome::Failed { error } => format!("FAILED: {error}"),
            };
            log.lock()
                .expect("logger")
                .log(format_args!("cell {} rep {}: {status}", cell.model, cell.repetition));
        })?;
        let out = out_path(cfg);
        write_json(&out.join("report.json"), &report)?;
        write_file(&out.join("report.txt"), report.to_text())?;
        ctx.log(format_args!("{}", report.to_text().trim_end()));
        Ok(())
    }
}

struct Predict;

impl Command for Predict {
    fn name(&self) -> &'static str {
        "predict"
    }

    fn about(&self) -> &'static str {
        "per-record label sets and scores for a checkpoint and dataset"
    }

    fn seed(&self, _: &RunConfig) -> Option<u64> {
        None
    }

    fn schema(&self, ctx: &Context, _: &Overrides) -> Result<Schema> {
        Ok(Schema::default()
            .required("checkpoint")
            .required("data")
            .value("thresholds", Thresholds::default(), Kind::Object)
            .value("out", ctx.out_dir.join("predictions.json"), Kind::String))
    }

    fn run(&self, cfg: &RunConfig, ctx: &mut Context) -> Result<()> {
        let ck = open_checkpoint(cfg)?;
        let ds = open_dataset("data", cfg)?;
        check_heads(&ck.model, &ds)?;
        let thresholds: Thresholds = cfg.get("thresholds")?;
        let cut = thresholds.resolve(ck.model.head_names())?;
        let scores = metrics::score_dataset(&ck.model, &ds)?;
        #[derive(Serialize)]
        struct Prediction<'a> {
            id: &'a str,
            labels: Vec<&'a str>,
            scores: std::collections::BTreeMap<&'a str, f64>,
        }
        let heads = ck.model.head_names();
        let rows: Vec<Prediction> = ds
            .records()
            .iter()
            .zip(&scores)
            .map(|(r, s)| Prediction {
                id: &r.source_id,
                labels: heads
                    .iter()
                    .zip(s)
                    .zip(&cut)
                    .filter(|((_, &p), &t)| p > t)
                    .map(|((h, _), _)| h.as_str())
                    .collect(),
                scores: heads.iter().map(String::as_str).zip(s.iter().copied()).collect(),
            })
            .collect();
        let out = out_path(cfg);
        write_json(&out, &rows)?;
        ctx.log(format_args!("wrote {} predictions to {}", rows.len(), out.display()));
        Ok(())
    }
}
