use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brnlab::data::{annotations_as_detections, read_annotations, write_detections};
use serde_json::Value;

fn brnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brnlab"))
        .args(args)
        .env("BRNLAB_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = brnlab(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"num_videos": 12, "sequence_length": 64}"#).unwrap();
    let data = dir.join("data");
    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--out", s(&data)]);
    data
}

/// Every file under `dir`, relative path to bytes, manifests excluded.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") || p.parent().unwrap().ends_with("checkpoint") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_default_config_writes_250_videos() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", s(&data)]);
    let features = fs::read_dir(data.join("features")).unwrap().count();
    assert_eq!(features, 250);
    assert_eq!(read_annotations(&data.join("annotations.json")).unwrap().videos.len(), 250);
    let man = json(&data.join("run_manifest.json"));
    assert_eq!(man["command"], "gen");
    assert_eq!(man["seed"], 0);
    assert_eq!(man["checksums"].as_object().unwrap().len(), 253);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ann_path = data.join("annotations.json");
    let dets = dir.path().join("gt_dets.json");
    write_detections(&annotations_as_detections(&read_annotations(&ann_path).unwrap()), &dets).unwrap();
    let report = dir.path().join("report.json");
    for preset in ["anet", "thumos"] {
        ok(&["eval", "--detections", s(&dets), "--annotations", s(&ann_path), "--preset", preset, "--out", s(&report)]);
        let r = json(&report);
        let per = r["map"]["per_threshold"].as_array().unwrap();
        assert_eq!(per.len(), if preset == "anet" { 10 } else { 5 });
        for v in per {
            assert_eq!(v[1].as_f64().unwrap(), 100.0);
        }
        assert_eq!(r["map"]["average"].as_f64().unwrap(), 100.0);
    }
    assert!(dir.path().join("report.txt").exists());
    assert!(dir.path().join("report.manifest.json").exists());

    let split = dir.path().join("val.json");
    ok(&[
        "eval", "--detections", s(&dets), "--annotations", s(&ann_path), "--split-file", s(&data.join("split.json")),
        "--split", "val", "--out", s(&split),
    ]);
    assert_eq!(json(&split)["map"]["average"].as_f64().unwrap(), 100.0);
}

#[test]
fn diagnose_identical_files_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ann_path = data.join("annotations.json");
    let dets = dir.path().join("dets.json");
    write_detections(&annotations_as_detections(&read_annotations(&ann_path).unwrap()), &dets).unwrap();
    let out = dir.path().join("diag.json");
    ok(&["diagnose-vbp", "--baseline", s(&dets), "--brn", s(&dets), "--annotations", s(&ann_path), "--out", s(&out)]);
    let d = json(&out);
    let mut deltas = vec![d["average_map"]["delta"].clone(), d["merge_rate"]["delta"].clone()];
    for key in ["distance_map", "coverage_fnr", "coverage_map"] {
        deltas.extend(d[key].as_object().unwrap().values().map(|v| v["delta"].clone()));
    }
    assert!(deltas.iter().any(Value::is_number));
    for v in deltas {
        assert!(v.is_null() || v.as_f64() == Some(0.0), "{v}");
    }
}

#[test]
fn bad_flags_and_missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = brnlab(&["gen", "--bogus", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = brnlab(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = brnlab(&["train", "--data", ".", "--model", "resnet", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"min_length": 0.9, "max_length": 0.5}"#).unwrap();
    let out = brnlab(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = brnlab(&["gen", "--out", s(dir.path())]);
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_brnlab"))
        .args(["gen", "--out", s(&dir.path().join("e"))])
        .env("BRNLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(brnlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn full_workflow_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ann_path = data.join("annotations.json");
    let tcfg = dir.path().join("train.json");
    fs::write(
        &tcfg,
        r#"{"epochs": 2, "milestones": [1], "batch_size": 4, "hidden_dim": 4, "num_levels": 3, "crop_window": 48}"#,
    )
    .unwrap();
    let run = |tag: &str| {
        let root = dir.path().join(tag);
        let run_dir = root.join("run");
        ok(&["train", "--data", s(&data), "--config", s(&tcfg), "--ablate", "no-selection", "--out", s(&run_dir)]);
        let dets = root.join("dets.json");
        ok(&["detect", "--checkpoint", s(&run_dir.join("checkpoint")), "--data", s(&data), "--split", "all", "--out", s(&dets)]);
        ok(&["eval", "--detections", s(&dets), "--annotations", s(&ann_path), "--out", s(&root.join("report.json"))]);
        ok(&["plot", "--kind", "loss-curve", "--log", s(&run_dir), "--out", s(&root.join("loss"))]);
        ok(&[
            "plot", "--kind", "selection-weights", "--checkpoint", s(&run_dir.join("checkpoint")), "--data", s(&data),
            "--out", s(&root.join("weights")),
        ]);
        ok(&[
            "plot", "--kind", "detections-timeline", "--detections", s(&dets), "--annotations", s(&ann_path), "--out",
            s(&root.join("timeline")),
        ]);
        root
    };
    let before = snapshot(&data);
    let a = run("a");
    let b = run("b");
    assert_eq!(snapshot(&data), before, "inputs were modified");
    assert_eq!(snapshot(&a), snapshot(&b));

    let resolved = json(&a.join("run").join("run_manifest.json"));
    assert_eq!(resolved["config"]["epochs"], 2);
    assert_eq!(resolved["config"]["base_lr"], 3e-3);
    assert_eq!(resolved["config"]["ablations"][0], "no-selection");
    assert!(fs::read_to_string(a.join("weights.csv")).unwrap().starts_with("scale,time,kernel 1 rate 1"));
    assert!(fs::read_to_string(a.join("timeline.svg")).unwrap().contains("ground truth"));

    let out = brnlab(&[
        "plot", "--kind", "selection-weights", "--checkpoint", s(&a.join("run").join("checkpoint")), "--data", s(&data),
        "--block", "9", "--out", s(&a.join("w9")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
