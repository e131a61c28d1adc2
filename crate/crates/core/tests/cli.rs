mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::{line_count, pipeline, prefgate, prefgate_ok, BIN};
use prefgate::sampler::parse_curve_csv;

/// Small enough for seconds-scale runs.
const SMALL: [&str; 16] = [
    "--n-pairs", "60", "--n-sft-sequences", "120", "--d-model", "8", "--ffn-hidden", "16",
    "--max-len", "64", "--sft-epochs", "1", "--dpo-epochs", "2", "--seed", "3",
];

fn small_args(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = vec!["--run-dir".into(), dir.to_str().unwrap().into()];
    v.extend(SMALL.iter().map(|s| s.to_string()));
    v
}

fn run_stage(dir: &Path, stage: &[&str]) -> String {
    let args = small_args(dir);
    let mut all: Vec<&str> = stage.to_vec();
    all.extend(args.iter().map(String::as_str));
    prefgate_ok(&all)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    if !dir.exists() {
        return BTreeMap::new();
    }
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = prefgate(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());
    assert_eq!(prefgate(&[]).status.code(), Some(1));
    assert_eq!(prefgate(&["--help"]).status.code(), Some(0));
    assert_eq!(prefgate(&["sample", "--delta", "abc"]).status.code(), Some(1));
}

#[test]
fn sample_at_zero_keeps_every_line() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen", "sft", "score"] {
        run_stage(dir.path(), &[stage]);
    }
    run_stage(dir.path(), &["sample", "--delta", "0"]);
    let scored = line_count(&dir.path().join("scored.jsonl"));
    assert_eq!(scored, 54);
    assert_eq!(line_count(&dir.path().join("sampled.jsonl")), scored);
    assert_eq!(
        fs::read(dir.path().join("sampled.jsonl")).unwrap(),
        fs::read(dir.path().join("scored.jsonl")).unwrap()
    );

    run_stage(dir.path(), &["sample", "--retain", "0.5"]);
    assert_eq!(line_count(&dir.path().join("sampled.jsonl")), 27);
    run_stage(dir.path(), &["sample", "--delta", "1e9"]);
    assert_eq!(line_count(&dir.path().join("sampled.jsonl")), 0);
}

#[test]
fn pipeline_reruns_are_byte_identical_and_inputs_untouched() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let stages: [&[&str]; 7] = [&["gen"], &["sft"], &["score"], &["sample", "--retain", "0.5"], &["analyze"], &["dpo"], &["eval"]];
    let outputs: [&[&str]; 7] = [
        &["sft_corpus.jsonl", "train.jsonl", "heldout.jsonl"],
        &["reference.ckpt", "sft_log.tsv"],
        &["scored.jsonl"],
        &["sampled.jsonl"],
        &["curve.csv", "curve.svg"],
        &["policy.ckpt", "dpo_log.tsv"],
        &["report.tsv", "report.txt"],
    ];
    for (stage, produced) in stages.iter().zip(outputs) {
        let before = snapshot(&a);
        run_stage(&a, stage);
        let after = snapshot(&a);
        for (path, bytes) in &before {
            let name = path.file_name().unwrap().to_str().unwrap();
            if !produced.contains(&name) && !name.ends_with(".resolved.toml") {
                assert_eq!(&after[path], bytes, "{stage:?} modified {name}");
            }
        }
        for name in produced {
            assert!(a.join(name).exists(), "{stage:?} did not write {name}");
        }
        run_stage(&b, stage);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.len(), sb.len());
    for (path, bytes) in &sa {
        let name = path.file_name().unwrap();
        if !name.to_str().unwrap().ends_with(".toml") {
            assert_eq!(bytes, &sb[&b.join(name)], "{name:?} differs between runs");
        }
    }
    let log = fs::read_to_string(a.join("dpo_log.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch\tmean_loss\tmean_margin"));
    assert_eq!(log.lines().count(), 3);
    let report = fs::read_to_string(a.join("report.tsv")).unwrap();
    assert!(report.starts_with("n_pairs\taccuracy\tmean_margin\ttie_count\n6\t"), "{report}");
}

#[test]
fn analyze_output_is_a_nested_curve() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen", "sft", "score"] {
        run_stage(dir.path(), &[stage]);
    }
    let stdout = run_stage(dir.path(), &["analyze", "--deltas", "0,0.05,0.1,0.2", "--analyze-retain", "0.25"]);
    let csv = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(stdout, csv);
    let rows = parse_curve_csv(&csv).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].delta, 0.0);
    assert_eq!(rows[0].retained_fraction, 1.0);
    assert!(rows.windows(2).all(|w| w[0].delta <= w[1].delta));
    assert!(rows.windows(2).all(|w| w[0].retained_count >= w[1].retained_count));
    assert!(rows.iter().any(|r| r.retained_count == 14), "{csv}");
    let svg = fs::read_to_string(dir.path().join("curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let out = prefgate(&["analyze", "--run-dir", dir.path().to_str().unwrap(), "--deltas", "1,0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn echoed_config_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    run_stage(dir.path(), &["gen"]);
    let echo = dir.path().join("gen.resolved.toml");
    let text = fs::read_to_string(&echo).unwrap();
    assert!(text.contains("n_pairs = 60") && text.contains("seed = 3"), "{text}");
    let train = fs::read(dir.path().join("train.jsonl")).unwrap();
    fs::remove_file(dir.path().join("train.jsonl")).unwrap();

    prefgate_ok(&["gen", "--config", echo.to_str().unwrap()]);
    assert_eq!(fs::read(dir.path().join("train.jsonl")).unwrap(), train);
    assert_eq!(fs::read_to_string(&echo).unwrap(), text, "replay rewrote its own config");
}

#[test]
fn seed_precedence_env_then_flag() {
    let root = tempfile::tempdir().unwrap();
    let gen = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let path = root.path().join(dir);
        let mut cmd = Command::new(BIN);
        cmd.args(["gen", "--n-pairs", "20", "--n-sft-sequences", "5", "--run-dir", path.to_str().unwrap()]);
        cmd.env_remove("PREFGATE_SEED").env("RUST_LOG", "warn");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env {
            cmd.env("PREFGATE_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(path.join("train.jsonl")).unwrap()
    };
    let by_flag = gen("flag", None, Some("5"));
    assert_eq!(gen("env", Some("5"), None), by_flag);
    assert_eq!(gen("both", Some("9"), Some("5")), by_flag);
    assert_ne!(gen("other", Some("9"), None), by_flag);

    let out = Command::new(BIN).args(["gen", "--run-dir", root.path().join("bad").to_str().unwrap()]).env("PREFGATE_SEED", "x").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[lm]\nd_model = 8\nwidth = 3\n").unwrap();
    let out = prefgate(&["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
    let out = prefgate(&["gen", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    run_stage(dir.path(), &["gen"]);
    let train = dir.path().join("train.jsonl");
    let mut text = fs::read_to_string(&train).unwrap();
    text.push_str("{\"prompt\": \"abc\", \"chosen\": \"x\"}\n");
    fs::write(&train, &text).unwrap();
    run_stage(dir.path(), &["sft"]);
    let args = small_args(dir.path());
    let mut all = vec!["score"];
    all.extend(args.iter().map(String::as_str));
    let out = prefgate(&all);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 55") && err.contains("rejected"), "{err}");

    let mut all = vec!["sample", "--scored", "train.jsonl", "--sampled", "train.jsonl"];
    all.extend(args.iter().map(String::as_str));
    assert_eq!(prefgate(&all).status.code(), Some(1));
    assert_eq!(fs::read_to_string(&train).unwrap(), text);
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefgate_ok(&["gradcheck", "--run-dir", dir.path().to_str().unwrap()]);
    assert!(out.lines().last().unwrap().starts_with("PASS"), "{out}");
    assert_eq!(fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap(), out);
}

#[test]
fn seeded_small_pipeline_completes() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_args(dir.path());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    pipeline(dir.path(), &args[2..]);
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.starts_with("n_pairs = 6\naccuracy = "), "{report}");
}
