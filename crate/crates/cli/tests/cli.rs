use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use m3fusion::data::{Dataset, Sample};
use m3fusion::metrics::MetricsReport;

fn m3fusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3fusion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small synthetic splits in `dir`.
fn synth(dir: &Path) {
    let o = m3fusion(&["synth", "--out", s(dir), "--train-per-class", "10", "--test-per-class", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(dir: &Path, tag: &str) -> Output {
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let log = dir.join(format!("{tag}.csv"));
    let data = dir.join("train.m3d");
    m3fusion(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--seed",
        "7",
        "--checkpoint",
        s(&ckpt),
        "--loss-log",
        s(&log),
    ])
}

#[test]
fn same_seed_trains_identically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for tag in ["a", "b"] {
        let o = train(dir.path(), tag);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = String::from_utf8_lossy(&o.stdout);
        assert!(out.contains("seed = 7") && out.contains("epochs = 2"), "{out}");
    }
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    let log = String::from_utf8(read("a.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,l1,l2,l_fus,l_total"));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
}

#[test]
fn eval_writes_metrics_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(train(dir.path(), "m").status.success());
    let (json, ppm) = (dir.path().join("m.json"), dir.path().join("m.ppm"));
    let test = dir.path().join("test.m3d");
    let ckpt = dir.path().join("m.ckpt");
    let o = m3fusion(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--metrics", s(&json), "--heatmap", s(&ppm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = MetricsReport::from_json(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!((report.samples, report.classes()), (160, 8));
    assert!(dir.path().join("m.csv").exists());

    let again = dir.path().join("again.ppm");
    let o = m3fusion(&["heatmap", "--metrics", s(&json), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&again).unwrap(), fs::read(&ppm).unwrap());
}

#[test]
fn eval_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(train(dir.path(), "m").status.success());
    let synth = Dataset::load(dir.path().join("test.m3d")).unwrap();
    let mut three = Dataset::new(synth.dates, synth.variables, synth.patch, synth.channels, 3);
    for (i, sample) in synth.samples.iter().take(6).enumerate() {
        three
            .push(Sample {
                label: i % 3,
                ..sample.clone()
            })
            .unwrap();
    }
    let path = dir.path().join("three.m3d");
    three.save(&path).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = m3fusion(&["eval", "--checkpoint", s(&ckpt), "--data", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("class count mismatch"), "{}", stderr(&o));
}

#[test]
fn config_file_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let data = dir.path().join("train.m3d");
    let good = dir.path().join("good.toml");
    let ckpt = dir.path().join("c.ckpt");
    fs::write(&good, format!("epochs = 1\nseed = 3\ncheckpoint = {:?}\n", s(&ckpt))).unwrap();
    let o = m3fusion(&["train", "--data", s(&data), "--config", s(&good)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 3"));
    assert!(ckpt.exists());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 1\nlearning_rat = 0.1\n").unwrap();
    let o = m3fusion(&["train", "--data", s(&data), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let o = m3fusion(&["train", "--data", s(&data), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = m3fusion(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn reduced_gradcheck_passes() {
    let o = m3fusion(&["gradcheck", "--reduced"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(out.lines().count() >= 14 && out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn prep_splits_a_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("prepped");
    let input = dir.path().join("test.m3d");
    let o = m3fusion(&["prep", "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train = Dataset::load(out.join("train.m3d")).unwrap();
    let test = Dataset::load(out.join("test.m3d")).unwrap();
    assert_eq!(train.len() + test.len(), 160);
    assert!(train.bounds.is_some());
}
