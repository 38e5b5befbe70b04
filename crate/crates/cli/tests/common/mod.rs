#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A tiny problem that trains in about a second.
pub const SMALL_CONFIG: &str = r#"
seed = 3

[data]
height = 16
width = 16
clip_len = 3
train_clips = 3
val_clips = 1
min_size = 4
max_size = 7
noise = 0.1

[model]
dim = 4
heads = 2
ffn_dim = 8
mar_ffn_dim = 8
backbone_hidden = 8
k_low = 1
k_high = 1

[train]
stage1_epochs = 40
stage2_epochs = 4
stage3_epochs = 2
stage2_lr = 0.5
"#;

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL_CONFIG}\n{extra}")).unwrap();
    path
}

pub fn stfmar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfmar"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

pub fn stfmar_env(dir: &Path, args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfmar"))
        .current_dir(dir)
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs `args` and panics with the captured streams unless it exits 0.
pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = stfmar(dir, args);
    assert_eq!(
        code(&out),
        0,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&out),
        stderr(&out)
    );
    out
}

/// Every file under `dir`, relative path and contents, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}
