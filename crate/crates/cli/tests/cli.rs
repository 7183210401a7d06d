mod common;

use std::fs;

use common::{centered_dataset, ok, snapshot, wormloc, zero_checkpoint};
use wormloc::train::TrainConfig;

#[test]
fn synth_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "2", "--seed", "1", "--out", "a"]);
    let first = snapshot(&dir.path().join("a"));
    ok(dir.path(), &["synth", "--n", "2", "--seed", "1", "--out", "a"]);
    assert_eq!(snapshot(&dir.path().join("a")), first);
    assert_eq!(first.len(), 4, "{:?}", first.keys().collect::<Vec<_>>());

    // a different output directory changes only the recorded arguments
    ok(dir.path(), &["synth", "--n", "2", "--seed", "1", "--out", "b"]);
    let mut second = snapshot(&dir.path().join("b"));
    let mut first = first;
    first.remove("run.json");
    second.remove("run.json");
    assert_eq!(first, second);
}

#[test]
fn full_chain_completes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n", "12", "--seed", "3", "--out", "raw"]);
    let raw = snapshot(&d.join("raw"));
    let out = ok(d, &["preprocess", "--manifest", "raw/manifest.csv", "--out", "crops"]);
    assert!(out.contains("of 12 rows"), "{out}");
    let crops = snapshot(&d.join("crops"));
    ok(d, &["train", "--data", "crops", "--out", "model", "--epochs", "1", "--runs", "1"]);
    for f in ["run.json", "run_00/metrics.csv", "run_00/best.ckpt", "run_00/last.ckpt"] {
        assert!(d.join("model").join(f).is_file(), "missing {f}");
    }
    let report = ok(d, &["eval", "--ckpt", "model/run_00/last.ckpt", "--data", "crops"]);
    assert_eq!(report.lines().filter(|l| l.contains("(PCK @")).count(), 9, "{report}");

    // inputs are never touched
    assert_eq!(snapshot(&d.join("raw")), raw);
    assert_eq!(snapshot(&d.join("crops")), crops);
}

#[test]
fn perfect_oracle_scores_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    centered_dataset(&d.join("data"), 10);
    zero_checkpoint(&d.join("zero.ckpt"), TrainConfig::default());
    let out = ok(
        d,
        &["eval", "--ckpt", "zero.ckpt", "zero.ckpt", "--data", "data", "--out", "report"],
    );
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("(PCK @")).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|l| l.ends_with("100.00 ± 0.00")), "{out}");
    let csv = fs::read_to_string(d.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).filter(|l| l.contains(",100.00,0.00,2")).count(), 9, "{csv}");
}

#[test]
fn error_kinds_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    centered_dataset(&d.join("data"), 4);
    fs::write(d.join("bad.toml"), "lr = \n").unwrap();
    fs::write(d.join("unknown.toml"), "learning_rate = 0.1\n").unwrap();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let cases: [(&[&str], i32, &str); 6] = [
        (&["train", "--data", "data", "--out", "m", "--bogus"], 2, "usage"),
        (&["eval", "--ckpt", "missing.ckpt", "--data", "data"], 3, "io"),
        (&["train", "--data", "nowhere", "--out", "m"], 3, "io"),
        (&["train", "--data", "data", "--out", "m", "--config", "bad.toml"], 4, "data"),
        (&["train", "--data", "data", "--out", "m", "--config", "unknown.toml"], 4, "data"),
        (&["eval", "--ckpt", "junk.ckpt", "--data", "data"], 4, "data"),
    ];
    for (args, code, kind) in cases {
        let out = wormloc(d, args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        let line = stderr.lines().last().unwrap();
        assert!(line.starts_with(&format!("error[{kind}] code={code}: ")), "{line}");
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    }
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n", "8", "--seed", "5", "--out", "raw"]);
    ok(d, &["preprocess", "--manifest", "raw", "--out", "crops"]);
    ok(d, &["train", "--data", "crops", "--out", "model", "--epochs", "1", "--runs", "2", "--batch-size", "4"]);
    ok(d, &["plot", "--metrics", "model/run_00/metrics.csv", "model/run_01/metrics.csv", "--out-svg", "fig/curves.svg"]);
    let model = snapshot(&d.join("model"));
    let fig = snapshot(&d.join("fig"));
    fs::remove_dir_all(d.join("model")).unwrap();
    fs::remove_dir_all(d.join("fig")).unwrap();
    fs::create_dir(d.join("fig")).unwrap();
    fs::write(d.join("fig/curves.run.json"), &fig["curves.run.json"]).unwrap();
    fs::create_dir(d.join("model")).unwrap();
    fs::write(d.join("model/run.json"), &model["run.json"]).unwrap();
    ok(d, &["rerun", "model/run.json"]);
    ok(d, &["rerun", "fig/curves.run.json"]);
    assert_eq!(snapshot(&d.join("model")), model);
    assert_eq!(snapshot(&d.join("fig")), fig);
}

#[test]
fn outputs_may_not_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n", "2", "--seed", "1", "--out", "raw"]);
    let before = snapshot(&d.join("raw"));
    let out = wormloc(d, &["preprocess", "--manifest", "raw/manifest.csv", "--out", "raw"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(snapshot(&d.join("raw")), before);
}

#[test]
fn predict_and_baseline_render_svgs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n", "1", "--seed", "2", "--out", "raw"]);
    zero_checkpoint(&d.join("zero.ckpt"), TrainConfig::default());
    let out = ok(
        d,
        &["predict", "--ckpt", "zero.ckpt", "--image", "raw/worm_0000.png", "--raw", "--out-svg", "p.svg"],
    );
    assert!(out.starts_with("crop head=(74.50, 74.50) tail=(74.50, 74.50)"), "{out}");
    let svg = fs::read_to_string(d.join("p.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("#0050ff") && svg.contains("#e000e0"));
    ok(d, &["baseline", "--image", "raw/worm_0000.png", "--out-svg", "b.svg"]);
    let svg = fs::read_to_string(d.join("b.svg")).unwrap();
    assert!(svg.contains("<polygon"));
    assert!(d.join("b.run.json").is_file() && d.join("p.run.json").is_file());
}
