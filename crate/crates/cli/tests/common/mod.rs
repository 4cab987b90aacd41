#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

/// Runs the `dspo` binary against `run_dir` with `config`.
pub fn dspo(run_dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dspo"))
        .env("DSPO_RUN_DIR", run_dir)
        .env("RUST_LOG", "warn")
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("spawn dspo")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every file under `dir` with its modification time and contents.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let meta = std::fs::metadata(&path).unwrap();
                out.insert(path.clone(), (meta.modified().unwrap(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out
}

/// A configuration small enough to run every stage in seconds.
pub const TINY_CONFIG: &str = r#"
[corpus]
train_count = 3
test_count = 2
size = 24

[degrade]
crop = 16
downscale = 2

[model]
base_channels = 2
embed_dim = 4
vocab_size = 8
t_max = 20

[pretrain]
max_steps = 20
checkpoint_every = 10

[candidates]
count = 3
settings = [
  { label = "few-steps", steps = 2, cfg_scale = 1.0, adapter_scale = 1.0 },
  { label = "more-steps", steps = 5, cfg_scale = 1.0, adapter_scale = 1.0 },
  { label = "high-cfg", steps = 3, cfg_scale = 6.0, adapter_scale = 1.0 },
]

[segment]
segmenter = "grid"
grid_tiles = 2
top_k = 3

[finetune]
max_steps = 4
checkpoint_every = 2
reduction = "per_element_mean"

[evaluate]
rounds = 2
steps = 3
"#;

pub fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}
