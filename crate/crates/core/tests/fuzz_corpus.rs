//! Replays the fuzz seed corpora through every parser on stable Rust.

use std::path::PathBuf;

use primseg::config::Config;
use primseg::estimation::parse_attributes;
use primseg::io::{parse_labels, parse_ply, parse_xyz};
use primseg::linalg::SymmetricMatrix;
use primseg::segmentation::parse_segmentation;
use primseg::synth::{parse_ground_truth, SceneSpec};

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, String)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, String::from_utf8_lossy(&bytes).into_owned())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Every seed must run without panicking; `valid` seeds must parse and the
/// others must be rejected.
fn replay(target: &str, parse: impl Fn(&str) -> bool) {
    for (path, text) in seeds(target) {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let ok = parse(&text);
        if name.starts_with("valid") {
            assert!(ok, "{} should parse", path.display());
        } else if name.starts_with("invalid") {
            assert!(!ok, "{} should be rejected", path.display());
        }
    }
}

#[test]
fn xyz_corpus() {
    replay("parse_xyz", |t| parse_xyz(t).is_ok());
}

#[test]
fn ply_corpus() {
    replay("parse_ply", |t| parse_ply(t).is_ok());
}

#[test]
fn labels_corpus() {
    replay("parse_labels", |t| parse_labels(t).is_ok());
}

#[test]
fn attributes_corpus() {
    replay("parse_attributes", |t| parse_attributes(t, None).is_ok());
}

#[test]
fn matrix_corpus() {
    replay("parse_matrix", |t| SymmetricMatrix::read_lower(t).is_ok());
}

#[test]
fn config_corpus() {
    replay("parse_config", |t| Config::from_json_str(t).is_ok());
}

#[test]
fn segmentation_corpus() {
    replay("parse_segmentation", |t| {
        let a = parse_segmentation(t).is_ok();
        let b = parse_ground_truth(t).is_ok();
        a || b
    });
}

#[test]
fn scene_spec_corpus() {
    replay("parse_scene_spec", |t| serde_json::from_str::<SceneSpec>(t).map_or(false, |s| s.validate().is_ok()));
}
