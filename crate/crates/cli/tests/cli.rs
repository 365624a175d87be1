use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use ecgnet::dataset::{class, load_dataset};
use ecgnet::model::{Model, ModelConfig};
use ecgnet::train::{save_checkpoint, Checkpoint, TrainHistory};
use ecgnet_cli::{main_with_args, parse_config, run_command, CliError, ConfigError, Context};

#[derive(Clone, Default)]
struct Log(Arc<Mutex<Vec<u8>>>);

impl Write for Log {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl Log {
    fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

fn ctx(dir: &Path) -> (Context, Log) {
    let log = Log::default();
    (Context::new(dir, Box::new(log.clone())), log)
}

fn args(s: &[&str]) -> Vec<String> {
    s.iter().map(|s| s.to_string()).collect()
}

fn run(dir: &Path, argv: &[&str]) -> (i32, String) {
    let (mut c, log) = ctx(dir);
    let mut full = vec!["ecgnet"];
    full.extend_from_slice(argv);
    let code = main_with_args(args(&full), &mut c);
    (code, log.text())
}

/// Flags that shrink the trunk so end-to-end runs take seconds.
const TINY: &[&str] = &[
    "--model.conv_layers",
    "4",
    "--model.base_channels",
    "2",
    "--model.channel_cap",
    "4",
    "--model.kernel_size",
    "4",
];

#[test]
fn train_defaults_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = ctx(dir.path());
    let file = dir.path().join("train.json");
    std::fs::write(&file, r#"{"epochs": 96}"#).unwrap();
    let cfg = parse_config("train", &args(&["--train_data", "x"]), &c).unwrap();
    assert_eq!(cfg.get::<usize>("epochs").unwrap(), 96);
    assert_eq!(cfg.get::<usize>("batch_size").unwrap(), 32);
    assert_eq!(cfg.get::<f64>("l2_lambda").unwrap(), 1e-4);
    assert_eq!(cfg.get::<f64>("adam.learning_rate").unwrap(), 1e-3);
    let cfg = parse_config(
        "train",
        &args(&["--config", file.to_str().unwrap(), "--epochs", "3", "--train_data", "x"]),
        &c,
    )
    .unwrap();
    assert_eq!(cfg.get::<usize>("epochs").unwrap(), 3);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = ctx(dir.path());
    let err = parse_config("train", &args(&["--epohcs", "3", "--train_data", "x"]), &c).unwrap_err();
    assert!(matches!(&err, CliError::Config(ConfigError::UnknownKey { key, .. }) if key == "epohcs"));
    assert!(err.to_string().contains("epohcs"));
    let err = parse_config("train", &args(&["--epochs", "three", "--train_data", "x"]), &c).unwrap_err();
    assert!(matches!(&err, CliError::Config(ConfigError::TypeMismatch { key, .. }) if key == "epochs"));
    let err = parse_config("train", &args(&[]), &c).unwrap_err();
    assert!(matches!(&err, CliError::Config(ConfigError::MissingKey(k)) if k == "train_data"));
    let (code, _) = run(dir.path(), &["train", "--epohcs", "3"]);
    assert_eq!(code, 2);
}

#[test]
fn synth_table1_rare_class_proportion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t1");
    let (code, log) = run(dir.path(), &["synth", "--records", "2000", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{log}");
    assert!(log.contains("seed: 4"));
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.len(), 2000);
    let expected = 204.0 * 2000.0 / 41522.0;
    let chb = ds.count_of(class::COMPLETE_HEART_BLOCK).unwrap() as f64;
    assert!((chb - expected).abs() <= 1.0, "{chb} vs {expected}");
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(dir.path(), &["resample", "--input", "/nonexistent/ds"]);
    assert_eq!(code, 1);
    assert!(log.contains("input not found"), "{log}");
}

#[test]
fn predict_rejects_foreign_heads() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(run(dir.path(), &["synth", "--records", "4", "--out", data.to_str().unwrap()]).0, 0);
    let config = ModelConfig {
        conv_layers: 4,
        base_channels: 2,
        channel_cap: Some(2),
        kernel_size: 3,
        ..ModelConfig::default()
    }
    .with_heads(["not_a_class"]);
    let ckpt = dir.path().join("m.ckpt");
    let model = Model::<f32>::build(config, 0).unwrap();
    save_checkpoint(
        &ckpt,
        &Checkpoint {
            model,
            adam: None,
            train_config: None,
            history: TrainHistory::default(),
        },
    )
    .unwrap();
    let (mut c, _) = ctx(dir.path());
    let err = run_command(
        "predict",
        &args(&["--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]),
        &mut c,
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Vocabulary(_)), "{err}");
}

fn train_args<'a>(train: &'a str, val: &'a str, epochs: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut a = vec![
        "train",
        "--train_data",
        train,
        "--val_data",
        val,
        "--epochs",
        epochs,
        "--batch_size",
        "8",
        "--eval_every",
        "1",
        "--seed",
        "7",
        "--model.head_names",
        r#"["mobitz_i","first_degree_avb"]"#,
        "--out",
        out,
    ];
    a.extend_from_slice(TINY);
    a
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let ok = |argv: Vec<&str>| {
        let (code, log) = run(dir.path(), &argv);
        assert_eq!(code, 0, "{argv:?}\n{log}");
        log
    };
    ok(vec!["synth", "--records", "30", "--seed", "2", "--mix", "multitask-desk", "--out", &p("all")]);
    ok(vec!["split", "--input", &p("all"), "--fractions", "[0.6,0.2,0.2]", "--out", &p("s")]);
    ok(vec!["resample", "--input", &p("s.train"), "--per_class_target", "5", "--out", &p("r")]);
    let (tr, va) = (p("s.train"), p("s.val"));
    for out in ["run1", "run2"] {
        let log = ok(train_args(&tr, &va, "2", &p(out)));
        assert!(log.contains("seed: 7"));
    }
    let h1 = std::fs::read(dir.path().join("run1/history.json")).unwrap();
    let h2 = std::fs::read(dir.path().join("run2/history.json")).unwrap();
    assert_eq!(h1, h2);

    let ck = p("run1/model.ckpt");
    for out in ["e1", "e2"] {
        ok(vec!["eval", "--checkpoint", &ck, "--data", &p("s.test"), "--out", &p(out)]);
    }
    let m1 = std::fs::read(dir.path().join("e1/metrics.json")).unwrap();
    assert_eq!(m1, std::fs::read(dir.path().join("e2/metrics.json")).unwrap());
    assert!(dir.path().join("e1/metrics.txt").exists());

    ok(vec![
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &p("s.test"),
        "--tune_thresholds_on",
        &va,
        "--diagnostics",
        "true",
        "--out",
        &p("e3"),
    ]);
    let e3: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("e3/metrics.json")).unwrap()).unwrap();
    assert!(e3["diagnostics"].is_array());

    ok(vec!["predict", "--checkpoint", &ck, "--data", &p("s.test"), "--out", &p("pred.json")]);
    let pred: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("pred.json")).unwrap()).unwrap();
    assert_eq!(pred.as_array().unwrap().len(), load_dataset(p("s.test")).unwrap().len());
    assert!(pred[0]["scores"]["mobitz_i"].is_number());

    // resume to a later epoch from the saved checkpoint
    let o1 = p("run1");
    let mut a = train_args(&tr, &va, "3", &o1);
    a.extend_from_slice(&["--resume", &ck]);
    let log = ok(a);
    assert!(log.contains("resuming"));
    assert!(log.contains("epoch   3"));
}

#[test]
fn experiment_report_has_single_and_multi_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let mut argv = vec![
        "experiment",
        "--preset",
        "table1-desk",
        "--data.records",
        "40",
        "--train.epochs",
        "1",
        "--train.batch_size",
        "16",
        "--out",
        out.to_str().unwrap(),
    ];
    argv.extend_from_slice(TINY);
    let (code, log) = run(dir.path(), &argv);
    assert_eq!(code, 0, "{log}");
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for col in ["single:complete_heart_block", "single:mobitz_i", "A", "B"] {
        assert!(text.contains(col), "{col}\n{text}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 12);
    assert_eq!(report["cells"].as_array().unwrap().len(), 7);
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(dir.path(), &["experiment", "--preset", "nope"]);
    assert_eq!(code, 2);
    assert!(log.contains("preset"));
}
