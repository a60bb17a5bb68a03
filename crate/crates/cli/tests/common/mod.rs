#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn mocoll(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocoll"))
        .current_dir(cwd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs and returns the run directory, panicking with stderr on failure.
pub fn mocoll_ok(cwd: &Path, args: &[&str]) -> PathBuf {
    let out = mocoll(cwd, args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "mocoll {args:?} failed:\n{}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run_dir: "))
        .expect("run_dir line");
    cwd.join(line)
}

pub const SIM_CONFIG: &str = r#"
seed = 3

[corpus]
simulated = true

[backends]
kind = "sim"

[orchestrator]
max_questions = 4

[orchestrator.few_shot]
k = 2

[simulation]
n_cases = 40
epsilon = 0.3
"#;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}
