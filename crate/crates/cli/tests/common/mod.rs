//! Shared fixture for the CLI tests: a small labeled dataset on disk, a
//! matching network/schedule config, and helpers for driving the binary.
//!
//! Each integration test target compiles its own copy and uses a different
//! subset of the helpers, so per-target dead-code lints are noise here.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pyrpoint::dataset::{synth_scene, write_ply, PlyMode, SceneRecipe, SizeRange};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pyrpoint")
}

pub fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

/// Run the binary with a scrubbed PYRPOINT_THREADS plus the given overrides.
pub fn run_env(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("PYRPOINT_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary launches")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("temp paths are utf-8")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal exit")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {}", path.display(), e));
    serde_json::from_str(&text)
        .unwrap_or_else(|e| panic!("{} is not JSON: {}", path.display(), e))
}

pub fn range(min: f64, max: f64) -> SizeRange {
    SizeRange { min, max }
}

pub fn scene_recipe(seed: u64, extent: f64) -> SceneRecipe {
    SceneRecipe {
        seed,
        extent,
        density: 40.0,
        ground: true,
        boxes: 1,
        box_size: range(1.5, 2.5),
        cylinders: 1,
        cylinder_size: range(3.0, 4.0),
        spheres: 1,
        sphere_size: range(0.8, 1.2),
        wires: 0,
        wire_size: range(4.0, 6.0),
    }
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub train_ply: PathBuf,
    pub val_ply: PathBuf,
}

impl Workspace {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Dataset with one training scene and one validation scene, plus a config
/// for a three-level network small enough to train in a few seconds.
pub fn workspace() -> Workspace {
    let dir = tempfile::tempdir().expect("tempdir");
    let train_ply = dir.path().join("train_scene.ply");
    let val_ply = dir.path().join("val_scene.ply");
    let train = synth_scene(&scene_recipe(77, 6.0)).expect("train scene");
    let val = synth_scene(&scene_recipe(78, 4.0)).expect("val scene");
    write_ply(&train, &train_ply, PlyMode::Binary, None).expect("train ply");
    write_ply(&val, &val_ply, PlyMode::Binary, None).expect("val ply");

    let dataset = dir.path().join("dataset.json");
    std::fs::write(
        &dataset,
        serde_json::json!({
            "name": "toy",
            "class_names": ["ground", "building", "pole", "vegetation", "wire"],
            "base_cell": 0.25,
            "input_sphere_radius": 2.0,
            "files": {
                "train": ["train_scene.ply"],
                "val": ["val_scene.ply"],
                "test": ["val_scene.ply"]
            },
            "min_points": 30
        })
        .to_string(),
    )
    .expect("dataset json");

    let config = dir.path().join("config.json");
    std::fs::write(&config, config_json().to_string()).expect("config json");
    Workspace { dir, config, dataset, train_ply, val_ply }
}

pub fn config_json() -> serde_json::Value {
    serde_json::json!({
        "network": {
            "levels": 3,
            "feature_dims": [4, 8, 16],
            "pyramid_start": 2,
            "class_count": 5,
            "hidden_layers": 1,
            "attention": "max_mean",
            "kernel_points": 5,
            "radius_factor": 2.5,
            "influence_factor": 0.5,
            "base_cell": 0.25,
            "input_sphere_radius": 2.0,
            "input_features": ["one", "height"],
            "neighbor_cap": 20,
            "seed": 9
        },
        "schedule": {
            "epochs": 2,
            "steps_per_epoch": 3,
            "lr0": 0.01,
            "decay": 0.95,
            "momentum": 0.9,
            "batch_size": 1,
            "checkpoint_every": 1,
            "eval_every": 1,
            "class_weights": true
        }
    })
}
