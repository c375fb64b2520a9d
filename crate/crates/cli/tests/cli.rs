use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbamnet::data::{load_directory, synth_generate};
use cbamnet::evaluation::{parse_report_csv, RowKind};
use cbamnet::training::load_checkpoint;

fn cbamnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbamnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const BACKBONE: &str = r#"{"blocks": [
    {"out_channels": 8, "kernel_size": 3, "pool": "max2"},
    {"out_channels": 16, "kernel_size": 3, "pool": "max2"}
], "input_shape": [3, 16, 16]}"#;

fn config_json(models: &[&str], train: &str, extra: &str) -> String {
    let models: Vec<String> = models
        .iter()
        .map(|label| format!(r#"{{"label": "{label}", "backbone": {BACKBONE}}}"#))
        .collect();
    format!(
        r#"{{"models": [{}], "train": {train}, "synth": {{"n": 40, "height": 16, "width": 16}}, "seed": 3{extra}}}"#,
        models.join(", ")
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let expected: [(&str, &[&str]); 5] = [
        ("train", &["--config", "--data", "--out", "--seed", "--threads"]),
        ("eval", &["--checkpoint", "--data", "--config", "--out", "--label", "--threshold"]),
        ("crossval", &["--config", "--data", "--out", "--seed", "--threads", "--folds"]),
        ("gradcheck", &["--config", "--seed"]),
        ("synth", &["--n", "--size", "--seed", "--out"]),
    ];
    for (cmd, flags) in expected {
        let out = cbamnet(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        let text = stdout(&out);
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}:\n{text}");
        }
    }
    assert_eq!(code(&cbamnet(&["--help"])), 0);
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 2, "batch_size": 8}"#, ""));
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("out{i}"))).collect();
    for out in &runs {
        let res = cbamnet(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    for name in ["checkpoint.bin", "history.csv", "report.csv", "report.txt", "confusion.txt", "config.json"] {
        let a = fs::read(runs[0].join(name)).unwrap();
        assert_eq!(a, fs::read(runs[1].join(name)).unwrap(), "{name} differs between runs");
    }
    let history = fs::read_to_string(runs[0].join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2);
    let rows = parse_report_csv(&fs::read_to_string(runs[0].join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].model.as_str(), rows[0].kind), ("mini", RowKind::Test));
    let ck = load_checkpoint(runs[0].join("checkpoint.bin")).unwrap();
    assert_eq!(ck.seed, 3);

    let reseeded = dir.path().join("reseeded");
    let res = cbamnet(&["train", "--config", s(&cfg), "--out", s(&reseeded), "--seed", "4"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(load_checkpoint(reseeded.join("checkpoint.bin")).unwrap().seed, 4);
}

#[test]
fn eval_reads_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let out = dir.path().join("train");
    assert_eq!(code(&cbamnet(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);

    let data = dir.path().join("data");
    assert_eq!(code(&cbamnet(&["synth", "--n", "12", "--size", "20", "--seed", "9", "--out", s(&data)])), 0);
    let eval_out = dir.path().join("eval");
    let res = cbamnet(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--out",
        s(&eval_out),
        "--label",
        "mini",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = parse_report_csv(&fs::read_to_string(eval_out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].model, "mini");
    assert!(fs::read_to_string(eval_out.join("confusion.txt")).unwrap().contains("Monkeypox"));

    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let res = cbamnet(&["eval", "--checkpoint", s(&bad), "--data", s(&data), "--out", s(&eval_out)]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).starts_with("error [checkpoint]"), "{}", stderr(&res));
}

#[test]
fn invalid_learning_rate_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        &config_json(&["mini"], r#"{"epochs": 1, "learning_rate": -1}"#, ""),
    );
    let res = cbamnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    let err = stderr(&res);
    assert!(err.contains("learning_rate") && err.contains("error [config]"), "{err}");
    assert!(!dir.path().join("o").exists(), "nothing is written for a rejected config");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &config_json(&["mini"], r#"{"epochs": 1}"#, r#", "dropout": 0.5"#));
    let res = cbamnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("dropout"), "{}", stderr(&res));
}

#[test]
fn missing_data_directory_is_a_data_error_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let missing = dir.path().join("no-such-dataset");
    let res = cbamnet(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 3);
    let err = stderr(&res);
    assert!(err.contains("no-such-dataset") && err.starts_with("error [data]"), "{err}");
}

#[test]
fn crossval_writes_fold_matrices_and_comparative_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(&["first", "second"], r#"{"epochs": 1, "batch_size": 16}"#, ""),
    );
    let out = dir.path().join("cv");
    let res = cbamnet(&["crossval", "--config", s(&cfg), "--out", s(&out), "--threads", "2"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for label in ["first", "second"] {
        for i in 0..4 {
            let grid = fs::read_to_string(out.join(label).join(format!("confusion_fold{i}.txt"))).unwrap();
            assert_eq!(grid.lines().count(), 3);
        }
    }
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Model") && lines[1].starts_with("first") && lines[2].starts_with("second"));
    let rows = parse_report_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * (4 + 1));

    let single = dir.path().join("single");
    let res = cbamnet(&["crossval", "--config", s(&cfg), "--out", s(&single), "--threads", "1"]);
    assert_eq!(code(&res), 0);
    assert_eq!(fs::read(single.join("report.csv")).unwrap(), fs::read(out.join("report.csv")).unwrap());
}

#[test]
fn crossval_rejects_a_single_fold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let res = cbamnet(&["crossval", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--folds", "1"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn crossval_reports_a_fold_missing_a_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = synth_generate(8, 16, 16, 1).unwrap();
    cbamnet::data::write_dataset_ppm(&ds, &data).unwrap();
    // A single Monkeypox image: the fold holding it out trains on one class.
    let mut positives: Vec<PathBuf> = fs::read_dir(data.join("Monkeypox")).unwrap().map(|e| e.unwrap().path()).collect();
    positives.sort();
    for p in &positives[1..] {
        fs::remove_file(p).unwrap();
    }
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let res = cbamnet(&[
        "crossval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("o")),
        "--folds",
        "4",
    ]);
    assert_eq!(code(&res), 5, "{}", stderr(&res));
    assert!(stderr(&res).starts_with("error [crossval]"), "{}", stderr(&res));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let first = cbamnet(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let line = stdout(&first);
    let err: f64 = line
        .split("max relative error ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no error value in {line:?}"));
    assert!(err < 1e-4, "{line}");
    let second = cbamnet(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &config_json(&["mini"], r#"{"epochs": 1}"#, ""));
    let res = cbamnet(&["gradcheck", "--config", s(&cfg), "--sigmoid-grad-fault", "1.01"]);
    assert_ne!(code(&res), 0);
    assert!(stdout(&res).contains("FAIL"), "{}", stdout(&res));
}

#[test]
fn synth_writes_loadable_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let res = cbamnet(&["synth", "--n", "20", "--size", "12", "--seed", "5", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for class in ["Monkeypox", "Others"] {
        assert_eq!(fs::read_dir(out.join(class)).unwrap().count(), 10);
    }
    let loaded = load_directory(&out).unwrap();
    assert!(loaded.skipped.is_empty());
    let original = synth_generate(20, 12, 12, 5).unwrap();
    for s in original.samples() {
        let id = format!("{}/{}.ppm", s.label().name(), s.source_id());
        let back = loaded.dataset.samples().iter().find(|x| x.source_id() == id).unwrap();
        assert_eq!(back.pixels(), s.pixels());
    }
}

#[test]
fn synth_rejects_odd_counts_and_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    let res = cbamnet(&["synth", "--n", "7", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let res = cbamnet(&["synth", "--n", "4", "--size", "8", "--out", s(&blocker.join("below"))]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
}
