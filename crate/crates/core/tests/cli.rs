use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use primseg::synth::parse_ground_truth;
use tempfile::TempDir;

const PLANE_SPEC: &str = r#"{
  "seed": 1,
  "primitives": [
    {"surface": {"type": "plane", "origin": [0, 0, 0], "normal": [0, 0, 1], "u_dir": [1, 0, 0], "half_extent": [0.5, 0.5]}, "points": 400}
  ]
}"#;

const TWO_SPEC: &str = r#"{
  "seed": 7,
  "primitives": [
    {"surface": {"type": "plane", "origin": [0, 0, 0], "normal": [0, 0, 1], "u_dir": [1, 0, 0], "half_extent": [0.4, 0.4]}, "points": 300},
    {"surface": {"type": "sphere", "center": [0, 0, 0.8], "radius": 0.25}, "points": 300}
  ]
}"#;

fn primseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primseg"))
        .args(args)
        .env("PRIMSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &TempDir, name: &str, spec: &str) -> PathBuf {
    let spec_path = dir.path().join(format!("{name}.spec.json"));
    std::fs::write(&spec_path, spec).unwrap();
    let prefix = dir.path().join(name);
    let o = primseg(&["synth", "--spec", p(&spec_path), "--out-prefix", p(&prefix)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    prefix
}

fn file(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", prefix.display()))
}

#[test]
fn help_and_version_exit_zero() {
    for sub in ["segment", "synth", "eval", "dk", "tune"] {
        for flag in ["--help", "--version"] {
            let o = primseg(&[sub, flag]);
            assert_eq!(o.status.code(), Some(0), "{sub} {flag}");
            assert!(!o.stdout.is_empty());
        }
    }
    assert_eq!(primseg(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(primseg(&[]).status.code(), Some(1));
    assert_eq!(primseg(&["segment"]).status.code(), Some(1));
    assert_eq!(primseg(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn synth_writes_all_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a", TWO_SPEC);
    let b = synth(&dir, "b", TWO_SPEC);
    for suffix in [".xyz", ".labels", ".attrs", ".gt.json"] {
        let x = std::fs::read(file(&a, suffix)).unwrap();
        let y = std::fs::read(file(&b, suffix)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{suffix} differs");
    }
    let labels = std::fs::read_to_string(file(&a, ".labels")).unwrap();
    let counts = labels.lines().fold([0usize; 2], |mut c, l| {
        c[l.trim().parse::<usize>().unwrap()] += 1;
        c
    });
    assert_eq!(counts, [300, 300]);
    let (gt, surfaces) = parse_ground_truth(&std::fs::read_to_string(file(&a, ".gt.json")).unwrap()).unwrap();
    assert_eq!(gt.n(), 600);
    assert_eq!(surfaces.len(), 2);
}

#[test]
fn invalid_spec_exits_one() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"seed": 1, "noise": -1, "primitives": []}"#).unwrap();
    let o = primseg(&["synth", "--spec", p(&spec), "--out-prefix", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("x.xyz").exists());
}

#[test]
fn segment_plane_scene() {
    let dir = TempDir::new().unwrap();
    let prefix = synth(&dir, "plane", PLANE_SPEC);
    let out = dir.path().join("seg.json");
    let labels = dir.path().join("seg.labels");
    let o = primseg(&[
        "segment",
        "--input",
        p(&file(&prefix, ".xyz")),
        "--output",
        p(&out),
        "--labels-out",
        p(&labels),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("n=400") && summary.contains("segments=1"), "{summary}");
    let (seg, _) = parse_ground_truth(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(seg.num_segments(), 1);
    assert_eq!(std::fs::read_to_string(&labels).unwrap().lines().count(), 400);
}

#[test]
fn segment_then_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let prefix = synth(&dir, "two", TWO_SPEC);
    let out = dir.path().join("pred.json");
    let o = primseg(&[
        "segment",
        "--input",
        p(&file(&prefix, ".xyz")),
        "--attrs",
        p(&file(&prefix, ".attrs")),
        "--output",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = dir.path().join("report.json");
    let o = primseg(&["eval", "--pred", p(&out), "--gt", p(&file(&prefix, ".gt.json")), "--cloud", p(&file(&prefix, ".xyz")), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["seg_iou", "type_iou", "res_error", "p_coverage"] {
        assert!(v[key].is_f64(), "{key}");
    }
    assert!(v["seg_iou"].as_f64().unwrap() > 0.95);
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let dir = TempDir::new().unwrap();
    let prefix = synth(&dir, "two", TWO_SPEC);
    let gt = file(&prefix, ".gt.json");
    let report = dir.path().join("report.json");
    let o = primseg(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--cloud", p(&file(&prefix, ".xyz")), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["seg_iou"].as_f64(), Some(1.0));
    assert_eq!(v["type_iou"].as_f64(), Some(1.0));
    assert_eq!(v["p_coverage"].as_f64(), Some(1.0));
    assert!(v["res_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn eval_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let two = synth(&dir, "two", TWO_SPEC);
    let plane = synth(&dir, "plane", PLANE_SPEC);
    let report = dir.path().join("report.json");
    let o = primseg(&["eval", "--pred", p(&file(&plane, ".gt.json")), "--gt", p(&file(&two, ".gt.json")), "--cloud", p(&file(&two, ".xyz")), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(1));
    let missing = dir.path().join("nope.gt.json");
    let o = primseg(&["eval", "--pred", p(&file(&two, ".gt.json")), "--gt", p(&missing), "--cloud", p(&file(&two, ".xyz")), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.gt.json"));
    assert!(!report.exists());
}

#[test]
fn segment_missing_input_names_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.xyz");
    let out = dir.path().join("o.json");
    let o = primseg(&["segment", "--input", p(&missing), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.xyz"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn segment_bad_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let prefix = synth(&dir, "plane", PLANE_SPEC);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"k": 20, "bandwith_factor": 0.3}"#).unwrap();
    let o = primseg(&["segment", "--input", p(&file(&prefix, ".xyz")), "--config", p(&cfg), "--output", p(&dir.path().join("o.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bandwith_factor"), "{}", stderr(&o));
}

#[test]
fn pipeline_failure_exits_two_with_stage() {
    let dir = TempDir::new().unwrap();
    let xyz = dir.path().join("same.xyz");
    std::fs::write(&xyz, "1 2 3\n".repeat(20)).unwrap();
    let out = dir.path().join("o.json");
    let o = primseg(&["segment", "--input", p(&xyz), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("normalize"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn dk_csv_rows_and_validation() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("dk.csv");
    let o = primseg(&["dk", "--n", "60", "--k", "3", "--rho", "0", "--trials", "3", "--seed", "2", "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("trial,n,K,rho,procrustes_error,relative_error,bound,eigengap,frobenius_E"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let err: f64 = r.split(',').nth(4).unwrap().parse().unwrap();
        assert!(err < 1e-8, "{r}");
    }
    let o = primseg(&["dk", "--n", "61", "--k", "3", "--rho", "0.1", "--csv", p(&dir.path().join("bad.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("bad.csv").exists());
}

#[test]
fn tune_empty_dir_exits_one() {
    let dir = TempDir::new().unwrap();
    let o = primseg(&["tune", "--scenes", p(dir.path()), "--out", p(&dir.path().join("t.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tune_zero_iterations_keeps_config() {
    let dir = TempDir::new().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    let spec = dir.path().join("s.json");
    std::fs::write(&spec, TWO_SPEC).unwrap();
    let o = primseg(&["synth", "--spec", p(&spec), "--out-prefix", p(&scenes.join("s0"))]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"k": 30, "seed": 3}"#).unwrap();
    let out = dir.path().join("tuned.json");
    let trace = dir.path().join("trace.csv");
    let o = primseg(&["tune", "--scenes", p(&scenes), "--config", p(&cfg), "--out", p(&out), "--trace", p(&trace), "--max-iter", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tuned = primseg::config::Config::load(&out).unwrap();
    let base = primseg::config::Config::load(&cfg).unwrap();
    assert_eq!(tuned, base);
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("iteration,objective,step,"));
    assert_eq!(t.lines().count(), 2);
}
