//! Helpers shared by the CLI integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_idleak");

pub const SMALL: &str = r#"{
  "seed": 1,
  "dataset": {"toy": {"n_identities": 50, "renders_per_identity": 10, "smile_identity_coupling": 1.0, "test_count": 100}},
  "embedder_training": {"epochs": 5},
  "probes": {
    "source": "generator_prior",
    "prior": {"n_train": 120, "n_images": 60, "n_test": 30},
    "landmarks_from_id": {"kind": "landmarks_from_id", "hidden": [32], "loss": "mse", "optimizer": {"kind": "adam", "learning_rate": 0.001}, "batch_size": 16, "epochs": 3, "landmark_center": 112.0, "landmark_scale": 112.0},
    "histogram_from_id": {"kind": "histogram_from_id", "hidden": [8], "loss": "mse", "optimizer": {"kind": "adam", "learning_rate": 0.001}, "batch_size": 32, "epochs": 3},
    "landmarks_from_image": {"kind": "landmarks_from_image", "hidden": [16], "conv_channels": [4, 8], "input_pool": 8, "loss": "mse", "optimizer": {"kind": "adam", "learning_rate": 0.001}, "batch_size": 16, "epochs": 2, "landmark_center": 112.0, "landmark_scale": 112.0}
  },
  "init": {"n_samples": 1000, "regressor": {"hidden": [32], "epochs": 3}},
  "inversion": {"settings": {"steps": 6}, "toy_targets": 2}
}"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, text).unwrap();
    p
}

pub fn idleak(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("IDLEAK_OUT")
        .output()
        .unwrap()
}

pub fn ok(config: &Path, out: &Path, args: &[&str]) -> String {
    let o = idleak(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

pub fn pipeline(config: &Path, out: &Path) {
    ok(config, out, &["gen-toy-data"]);
    for kind in ["binary", "landmarks-from-id", "histogram-from-id", "landmarks-from-image"] {
        ok(config, out, &["train-probe", "--kind", kind]);
        ok(config, out, &["eval-probe", "--kind", kind]);
    }
    ok(config, out, &["train-init"]);
    ok(config, out, &["invert", "--ablation", "--workers", "2"]);
    ok(config, out, &["report"]);
}

/// Relative path to file contents for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
