use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trajret(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajret"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = trajret(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Synthetic corpus ingested and annotated in `dir/w`.
fn annotated(dir: &Path, trajectories: &str, min: &str, max: &str) {
    ok(
        dir,
        &["synth", "--out", "data", "--trajectories", trajectories, "--min-steps", min, "--max-steps", max, "--seed", "2"],
    );
    ok(dir, &["--work-dir", "w", "ingest", "--source", "mind2web=data"]);
    ok(dir, &["--work-dir", "w", "annotate"]);
}

#[test]
fn counts_match_hand_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    annotated(dir.path(), "3", "3", "3");
    ok(dir.path(), &["--work-dir", "w", "extract"]);
    let tsv = ok(dir.path(), &["--work-dir", "w", "report", "counts"]);
    // Per trajectory of three distinct states: 2(n-1) for tasks 1, 2, 4 and 5,
    // one gold plus five silver for task 3, n unique states plus the terminal
    // state for task 6.
    let totals: Vec<u64> = tsv
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals, [4, 4, 6, 4, 4, 4].map(|x| 3 * x));
    assert!(dir.path().join("w/report/counts_subtask.tsv").is_file());
}

#[test]
fn extract_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    annotated(dir.path(), "6", "1", "5");
    ok(dir.path(), &["--work-dir", "w", "extract", "--seed", "7"]);
    let first = fs::read(dir.path().join("w/extract/pairs.jsonl")).unwrap();
    ok(dir.path(), &["--work-dir", "w", "extract", "--seed", "7"]);
    assert_eq!(first, fs::read(dir.path().join("w/extract/pairs.jsonl")).unwrap());
    ok(dir.path(), &["--work-dir", "w", "extract", "--seed", "8"]);
    assert_ne!(first, fs::read(dir.path().join("w/extract/pairs.jsonl")).unwrap());
}

#[test]
fn reference_training_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--work-dir", "w", "train", "--steps", "256", "--lr", "5e-5", "--warmup", "0.05", "--batch", "2048",
        "--sub-batch", "1", "--dry-run",
    ];
    ok(dir.path(), &args);
    let echoed: toml::Table = fs::read_to_string(dir.path().join("w/train/config.toml")).unwrap().parse().unwrap();
    let train = echoed["train"].as_table().unwrap();
    assert_eq!(train["steps"].as_integer(), Some(256));
    assert_eq!(train["learning_rate"].as_float(), Some(5e-5));
    assert_eq!(train["warmup_fraction"].as_float(), Some(0.05));
    assert_eq!(train["batch_size"].as_integer(), Some(2048));
    assert_eq!(train["sub_batch_size"].as_integer(), Some(1));
}

#[test]
fn config_file_with_flag_overrides_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    annotated(dir.path(), "4", "2", "3");
    fs::write(dir.path().join("trajret.toml"), "work_dir = \"w\"\n[extract]\nseed = 3\n").unwrap();
    ok(dir.path(), &["extract"]);
    let echoed = fs::read_to_string(dir.path().join("w/extract/config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"), "{echoed}");
    ok(dir.path(), &["extract", "--seed", "9"]);
    let echoed = fs::read_to_string(dir.path().join("w/extract/config.toml")).unwrap();
    assert!(echoed.contains("seed = 9"), "{echoed}");
}

#[test]
fn missing_upstream_artifact_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajret(dir.path(), &["--work-dir", "w", "extract"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trajret annotate"), "{err}");
    let out = trajret(dir.path(), &["--work-dir", "w", "eval"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trajret train"));
}

#[test]
fn user_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&trajret(dir.path(), &["extract", "--bogus"])), 1);
    fs::write(dir.path().join("bad.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(code(&trajret(dir.path(), &["--config", "bad.toml", "extract"])), 1);
    assert_eq!(code(&trajret(dir.path(), &["train", "--temperature", "0", "--dry-run"])), 1);
    assert_eq!(code(&trajret(dir.path(), &["--help"])), 0);
}

#[test]
fn corrupt_artifacts_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    annotated(dir.path(), "3", "2", "2");
    ok(dir.path(), &["--work-dir", "w", "extract"]);
    let pairs = dir.path().join("w/extract/pairs.jsonl");
    let text = fs::read_to_string(&pairs).unwrap();
    fs::write(&pairs, text.replacen("syn-0000", "syn-9999", 1)).unwrap();
    let out = trajret(dir.path(), &["--work-dir", "w", "pools"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&pairs, "{not json}\n").unwrap();
    assert_eq!(code(&trajret(dir.path(), &["--work-dir", "w", "pools"])), 2);
}

fn pipeline(dir: &Path, work: &str) -> Vec<u8> {
    for args in [
        vec!["ingest", "--source", "mind2web=data"],
        vec!["annotate"],
        vec!["extract", "--seed", "5"],
        vec!["pools"],
        vec!["split", "--ood-fraction", "0.25"],
        vec!["serialize"],
        vec!["train", "--steps", "8", "--batch", "16", "--sub-batch", "4", "--dim", "16", "--lr", "1e-3"],
        vec!["embed"],
        vec!["eval"],
        vec!["report", "recall"],
        vec!["report", "masks", "--limit", "2"],
    ] {
        let mut full = vec!["--work-dir", work];
        full.extend(args);
        ok(dir, &full);
    }
    fs::read(dir.join(work).join("report/recall_overall.tsv")).unwrap()
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--out", "data", "--trajectories", "8", "--min-steps", "1", "--max-steps", "4", "--seed", "4"],
    );
    let a = pipeline(dir.path(), "a");
    let b = pipeline(dir.path(), "b");
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("method\tsplit\tmind2web R@1"));
    for name in ["eval/report.json", "train/checkpoint.bin", "embed/interval.bin", "report/masks/masks.tsv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    assert!(dir.path().join("a/report/masks/syn-0000_1.png").is_file());
}
