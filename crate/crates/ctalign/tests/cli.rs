use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctalign::error::exit;
use tempfile::TempDir;

const SMALL: &str = r#"{"experiment": {"train": {"epochs": 2, "ct_warmup_epochs": 1}, "n_train": 20, "n_test": 10}}"#;

fn ctalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctalign")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn workspace(files: &[(&str, &str)]) -> TempDir {
    let dir = TempDir::new().unwrap();
    for (name, body) in files {
        fs::write(dir.path().join(name), body).unwrap();
    }
    dir
}

fn line_value(out: &str, key: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key} in {out}"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn distance_reports_the_two_point_instance() {
    let dir = workspace(&[
        ("p.json", r#"{"dim": 2, "count": 2, "weights": [0.5, 0.5], "data": [1, 0, 0, 1]}"#),
        ("q.json", r#"{"dim": 2, "count": 2, "weights": [0.5, 0.5], "data": [1, 0, 0, 1]}"#),
    ]);
    let o = ctalign(dir.path(), &["distance", "p.json", "q.json", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!((line_value(&out, "ct_total") - 0.537883).abs() < 1e-6, "{out}");
    assert!((line_value(&out, "ct_forward") - 0.268941).abs() < 1e-6);
    assert!((line_value(&out, "ct_backward") - 0.268941).abs() < 1e-6);
    assert!(!out.contains("uniform weights assumed"));
    assert!(dir.path().join("o/effective_config.json").exists());
}

#[test]
fn identical_single_points_are_at_distance_zero() {
    let dir = workspace(&[("p.json", r#"{"dim": 3, "count": 1, "data": [0.3, -1, 2]}"#)]);
    let o = ctalign(dir.path(), &["distance", "p.json", "p.json", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(line_value(&out, "ct_total"), 0.0);
    assert!(out.contains("p.json has no weights; uniform weights assumed"), "{out}");
}

#[test]
fn distance_writes_plans_and_sinkhorn_on_request() {
    let dir = workspace(&[("p.json", r#"{"dim": 2, "count": 2, "data": [1, 0, 0, 1]}"#)]);
    let o = ctalign(dir.path(), &["distance", "p.json", "p.json", "--epsilon", "0.01", "--plans", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(line_value(&stdout(&o), "ot_cost") <= 0.02);
    for name in ["forward_plan.csv", "backward_plan.csv", "sinkhorn_plan.csv"] {
        let text = fs::read_to_string(dir.path().join("o").join(name)).unwrap();
        assert_eq!(text.lines().count(), 2);
        for field in text.lines().flat_map(|l| l.split(',')) {
            assert_eq!(field.split('.').nth(1).map(str::len), Some(6), "{field}");
        }
    }
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = workspace(&[
        ("q.json", r#"{"dim": 2, "count": 1, "data": [1, 0]}"#),
        ("bad.json", "{\"dim\": 2,\n \"count\": 1,\n \"data\": [1, 0,]}"),
        ("wide.json", r#"{"dim": 3, "count": 1, "data": [1, 0, 0]}"#),
        ("short.json", r#"{"dim": 2, "count": 2, "data": [1, 0, 0]}"#),
        ("unknown.json", r#"{"experiment": {"train": {"lr": 0.1}}}"#),
    ]);
    let parse = ctalign(dir.path(), &["distance", "bad.json", "q.json", "--out", "o"]);
    assert_eq!(code(&parse), exit::PARSE as i32);
    assert!(stderr(&parse).contains("line 3"), "{}", stderr(&parse));

    let shape = ctalign(dir.path(), &["distance", "wide.json", "q.json", "--out", "o"]);
    assert_eq!(code(&shape), exit::SHAPE as i32);
    let short = ctalign(dir.path(), &["distance", "short.json", "q.json", "--out", "o"]);
    assert_eq!(code(&short), exit::SHAPE as i32);

    let config = ctalign(dir.path(), &["train", "--config", "unknown.json", "--out", "o"]);
    assert_eq!(code(&config), exit::CONFIG as i32);
    assert!(stderr(&config).contains("lr"));

    let missing = ctalign(dir.path(), &["distance", "nope.json", "q.json", "--out", "o"]);
    assert_eq!(code(&missing), exit::IO as i32);

    let usage = ctalign(dir.path(), &["train", "--mode", "dense"]);
    assert_eq!(code(&usage), 2);

    let codes = [exit::PARSE, exit::SHAPE, exit::CONFIG, exit::GRID, exit::NUMERICAL, exit::INVALID_INPUT, exit::IO];
    for (i, c) in codes.iter().enumerate() {
        assert!(*c > 2 && !codes[..i].contains(c));
    }
}

#[test]
fn alpha_sweep_yields_one_row_per_point() {
    let dir = workspace(&[("small.json", SMALL)]);
    let o = ctalign(dir.path(), &["train", "--config", "small.json", "--alpha", "0,1", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("w/o CT,0.000000,"), "{summary}");
    assert!(rows[1].starts_with("CT,1.000000,"));
    for point in ["alpha0.00_ls1_k200", "alpha1.00_ls1_k200"] {
        for file in ["checkpoint.json", "trace.csv", "metrics.csv"] {
            assert!(dir.path().join("s").join(point).join(file).exists(), "{point}/{file}");
        }
    }

    let repeated = ctalign(dir.path(), &["sweep", "--config", "small.json", "--alpha", "1,1", "--out", "r"]);
    assert_eq!(code(&repeated), exit::CONFIG as i32);
}

#[test]
fn effective_config_replays_byte_identically() {
    let dir = workspace(&[("small.json", SMALL)]);
    let first =
        ctalign(dir.path(), &["train", "--config", "small.json", "--seed", "7", "--mode", "binary", "--out", "a"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let effective = fs::read_to_string(dir.path().join("a/effective_config.json")).unwrap();
    assert!(effective.contains("\"seed\": 7") && effective.contains("\"binary\""));
    let replay = ctalign(dir.path(), &["train", "--config", "a/effective_config.json", "--out", "b"]);
    assert_eq!(code(&replay), 0, "{}", stderr(&replay));
    for file in ["effective_config.json", "dataset.json", "checkpoint.json", "trace.csv", "metrics.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn eval_and_export_use_the_held_out_split() {
    let dir = workspace(&[("small.json", SMALL)]);
    assert_eq!(code(&ctalign(dir.path(), &["train", "--config", "small.json", "--out", "t"])), 0);

    let eval = ctalign(dir.path(), &["eval", "t/checkpoint.json", "--dataset", "t/dataset.json", "--out", "e"]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let trained = fs::read_to_string(dir.path().join("t/metrics.csv")).unwrap();
    let evaluated = fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    assert_eq!(trained, evaluated);
    let regenerated = ctalign(dir.path(), &["eval", "t/checkpoint.json", "--out", "g"]);
    assert_eq!(code(&regenerated), 0);
    assert_eq!(fs::read_to_string(dir.path().join("g/metrics.csv")).unwrap(), trained);

    let export = ctalign(
        dir.path(),
        &["export-plan", "t/checkpoint.json", "--sample", "0", "--label", "0", "--size", "8", "--out", "x"],
    );
    assert_eq!(code(&export), 0, "{}", stderr(&export));
    let grid = fs::read_to_string(dir.path().join("x/plan_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 8);
    assert!(grid.lines().all(|l| l.split(',').count() == 8));

    let out_of_range =
        ctalign(dir.path(), &["export-plan", "t/checkpoint.json", "--sample", "10", "--label", "0", "--out", "x"]);
    assert_eq!(code(&out_of_range), exit::SHAPE as i32);
}

#[test]
fn export_warns_on_absent_labels() {
    let dir = workspace(&[("small.json", SMALL)]);
    assert_eq!(code(&ctalign(dir.path(), &["train", "--config", "small.json", "--out", "t"])), 0);
    let dataset: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("t/dataset.json")).unwrap()).unwrap();
    let held_out = &dataset["samples"].as_array().unwrap()[20];
    let absent = held_out["labels"].as_array().unwrap().iter().position(|v| v == 0).unwrap();
    let o = ctalign(
        dir.path(),
        &["export-plan", "t/checkpoint.json", "--sample", "0", "--label", &absent.to_string(), "--out", "x"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("not in the ground truth"), "{}", stderr(&o));
}

#[test]
fn non_square_patch_counts_are_grid_errors() {
    let config = r#"{"experiment": {"dataset": {"num_patches": 15}, "train": {"epochs": 1, "ct_warmup_epochs": 0}, "n_train": 10, "n_test": 5}}"#;
    let dir = workspace(&[("c.json", config)]);
    let t = ctalign(dir.path(), &["train", "--config", "c.json", "--out", "t"]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let o = ctalign(dir.path(), &["export-plan", "t/checkpoint.json", "--sample", "0", "--label", "0", "--out", "x"]);
    assert_eq!(code(&o), exit::GRID as i32, "{}", stderr(&o));
}
