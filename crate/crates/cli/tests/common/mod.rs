#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stormtail")
}

/// Writes `config.toml` into `root` for a 200-sample synthetic run laid out
/// under `root`.
/// `eval_lines` go into the `[eval]` table.
pub fn smoke_config(root: &Path, eval_lines: &str) -> PathBuf {
    let text = format!(
        r#"schema_version = 1

[data]
num_samples = 200
calendar = []
seed = 11

[dataset]
path = "data"

[train]
epochs = 2
batch_size = 16
seeds = [0]
checkpoint_every = 1

[eval]
n_boot = 50
{eval_lines}

[attribute]
steps = 16
max_samples = 3

[paths]
run = "train"

[report]
inputs = ["eval"]
"#
    );
    let path = root.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn run(args: &[&str], cfg: &Path, out: &Path, cache: &Path) -> Output {
    Command::new(bin())
        .arg(args[0])
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .env("STORMTAIL_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn expect_ok(o: &Output, what: &str) {
    assert!(
        o.status.success(),
        "{what} failed with {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// The whole pipeline into `root`: datagen, train, eval, calibrate,
/// attribute, report.
pub fn pipeline(root: &Path) -> Vec<(String, bool)> {
    let cfg = smoke_config(root, "");
    let cache = root.join("cache");
    let steps: [(&str, &str); 6] = [
        ("datagen", "data"),
        ("train", "train"),
        ("eval", "eval"),
        ("calibrate", "calibrate"),
        ("attribute", "attribute"),
        ("report", "report"),
    ];
    steps
        .iter()
        .map(|(cmd, dir)| {
            let o = run(&[cmd, "--seed", "0", "--deterministic"], &cfg, &root.join(dir), &cache);
            if !o.status.success() {
                eprintln!("{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            }
            (cmd.to_string(), o.status.success())
        })
        .collect()
}

/// Relative path to bytes for every file below `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
