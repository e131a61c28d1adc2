#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_prefgate");

/// Runs the binary with `args` and returns its output; the master-seed
/// variable is cleared so the environment cannot leak into results.
pub fn prefgate(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PREFGATE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn prefgate")
}

/// Like [`prefgate`] but panics with stderr unless the exit code is 0.
pub fn prefgate_ok(args: &[&str]) -> String {
    let out = prefgate(args);
    assert!(
        out.status.success(),
        "prefgate {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// gen → sft → score → sample → analyze → dpo → eval in `run_dir`, with
/// `extra` appended to every invocation.
pub fn pipeline(run_dir: &Path, extra: &[&str]) {
    let dir = run_dir.to_str().expect("utf-8 path");
    for stage in [&["gen"][..], &["sft"], &["score"], &["sample"], &["analyze"], &["dpo"], &["eval"]] {
        let mut args: Vec<&str> = stage.to_vec();
        args.extend(["--run-dir", dir]);
        args.extend(extra);
        prefgate_ok(&args);
    }
}

pub fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .expect("read")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}
