#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fruitmon::cloud::{save_association_csv, save_ply, ColoredCloud, SceneAnnotation, TemporalAssociation};

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fruitmon"))
        .args(args)
        .output()
        .expect("failed to launch the fruitmon binary")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "fruitmon {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

/// A short orchard row with four fruits per session.
pub const SMALL_ORCHARD: &str = r#"{"schema_version": 1, "orchard": {"row_length": 0.12, "fruit_count": [4, 4],
    "points_per_fruit": [120, 150], "canopy_density": 100000.0, "disappear_prob": 0.0, "appear_prob": 0.0}}"#;

pub const TINY_MODELS: &str = r#"{"schema_version": 1,
    "model": {"encoder_channels": [4, 6], "decoder_channels": [4]},
    "encoder": {"channels": [2, 3, 3]},
    "matcher": {"token_dim": 4, "ff_dim": 4, "heads": 2, "n_freq": 1},
    "train": {"eval_every": 1}}"#;

/// `count` well separated blobs of ten points along x.
fn blobs(count: usize) -> (ColoredCloud, SceneAnnotation) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for b in 0..count {
        for k in 0..10 {
            points.push([0.05 * b as f64 + 0.001 * k as f64, 0.0, 0.0]);
            labels.push(Some(b));
        }
    }
    let colors = vec![[0.8, 0.1, 0.1]; points.len()];
    let cloud = ColoredCloud::new(points, colors).unwrap();
    let ann = SceneAnnotation::from_labels(&cloud, &labels).unwrap();
    (cloud, ann)
}

pub struct ConstructedScene {
    pub t: PathBuf,
    pub prev: PathBuf,
    pub truth: PathBuf,
    pub predicted: PathBuf,
}

/// Two sessions whose predicted instances equal the ground truth, with a
/// predicted association giving CM=8, MM=1, FM=1, TN=3, FN=1.
pub fn constructed_scene(dir: &Path) -> ConstructedScene {
    let (ct, at) = blobs(14);
    let (cp, ap) = blobs(12);
    let t = dir.join("t.ply");
    let prev = dir.join("prev.ply");
    save_ply(&ct, Some(&at), &t).unwrap();
    save_ply(&cp, Some(&ap), &prev).unwrap();
    let mut truth: Vec<Option<usize>> = (0..8).map(Some).collect();
    let mut predicted = truth.clone();
    // mismatch, false match, three true negatives, false negative
    truth.extend([Some(8), None, None, None, None, Some(11)]);
    predicted.extend([Some(9), Some(10), None, None, None, None]);
    let truth_path = dir.join("assoc_gt.csv");
    let pred_path = dir.join("assoc_pred.csv");
    save_association_csv(&TemporalAssociation::new(truth).unwrap(), &truth_path).unwrap();
    save_association_csv(&TemporalAssociation::new(predicted).unwrap(), &pred_path).unwrap();
    ConstructedScene {
        t,
        prev,
        truth: truth_path,
        predicted: pred_path,
    }
}

/// Runs `eval` on the constructed scene and returns its stdout.
pub fn eval_constructed(dir: &Path) -> String {
    let scene = constructed_scene(dir);
    let out = dir.join("report");
    run_ok(&[
        "eval",
        "--pred",
        s(&scene.t),
        s(&scene.prev),
        "--gt",
        s(&scene.t),
        s(&scene.prev),
        "--assoc-gt",
        s(&scene.truth),
        "--pred-assoc",
        s(&scene.predicted),
        "--out",
        s(&out),
    ])
}
