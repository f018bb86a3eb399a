#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that every command finishes in a few seconds.
pub const SMALL_CONFIG: &str = r#"
seed = 7

[data]
n = 300

[model]
embedding_dim = 8
hidden_dim = 8

[train]
epochs = 3

[sweep]
rates = [0.0, 0.9]
biased_epochs = 2
mle_epochs = 2
drift_epochs = 2
parallel = false

[audit]
extractors = ["hypo"]
"#;

pub fn drift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drift")).args(args).output().expect("spawn drift")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{SMALL_CONFIG}\n{extra}")).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Run a command and fail loudly with its output unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = drift(args);
    assert_eq!(code(&out), 0, "drift {args:?}\nstdout:\n{}\nstderr:\n{}", stdout(&out), stderr(&out));
    out
}
