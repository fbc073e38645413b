//! End-to-end checks of the command-line binary: exit codes, artifact
//! layout, determinism of generated data, and eval/train agreement.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lpgnet"))
}

fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn synth_tiny(dir: &Path, seed: &str) -> Output {
    run(&[
        "synth",
        "--classes", "4",
        "--f-t", "6",
        "--f-a", "6",
        "--train-dialogues", "8",
        "--val-dialogues", "4",
        "--test-dialogues", "4",
        "--min-len", "3",
        "--max-len", "5",
        "--seed", seed,
        "--out", dir.to_str().unwrap(),
    ])
}

#[test]
fn synth_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth_tiny(&a, "7").status.success());
    assert!(synth_tiny(&b, "7").status.success());
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(sha256(&a.join(name)), sha256(&b.join(name)), "{name} differs");
    }
    let c = tmp.path().join("c");
    assert!(synth_tiny(&c, "8").status.success());
    assert_ne!(sha256(&a.join("train.jsonl")), sha256(&c.join("train.jsonl")));
}

#[test]
fn invalid_class_count_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--classes", "1", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error_and_leaves_no_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--data", tmp.path().join("nope").to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
        "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists(), "failed run must not create the output directory");
}

#[test]
fn gradcheck_passes_at_tiny_scale() {
    let out = run(&["gradcheck", "--scale", "tiny"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS"), "stdout: {stdout}");
}

#[test]
fn bench_emits_one_csv_row_per_cell_and_arch() {
    let out = run(&["bench", "--dims", "8", "--seq-lens", "4,8", "--repeats", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains(',')).collect();
    // header plus |dims| * |seq_lens| * 2 architectures
    assert_eq!(rows.len(), 1 + 1 * 2 * 2, "rows: {rows:?}");
    assert!(rows[0].starts_with("arch,"));
}

#[test]
fn eval_on_val_split_reproduces_checkpointed_best_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    assert!(synth_tiny(&data_dir, "7").status.success());

    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--data", data_dir.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--hidden", "8",
        "--epochs", "2",
        "--batch-size", "4",
        "--seed", "11",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("report.json").exists());
    assert!(run_dir.join("manifest.json").exists());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    let best_epoch = report["per_seed"][0]["best_epoch"].as_u64().unwrap() as usize;
    // the checkpoint manifest stores the epoch history at full precision:
    // 8-byte magic, u64 little-endian manifest length, then JSON
    let bytes = std::fs::read(run_dir.join("checkpoint-11.ckpt")).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    let stored_f1 = manifest["history"][best_epoch]["val_macro_f1"].as_f64().unwrap();

    let json_out = tmp.path().join("eval.json");
    let out = run(&[
        "eval",
        "--checkpoint", run_dir.join("checkpoint-11.ckpt").to_str().unwrap(),
        "--data", data_dir.join("val.jsonl").to_str().unwrap(),
        "--json-out", json_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    let evaluated_f1 = eval["macro_f1"].as_f64().unwrap();
    assert_eq!(evaluated_f1.to_bits(), stored_f1.to_bits());
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data4 = tmp.path().join("four");
    assert!(synth_tiny(&data4, "7").status.success());
    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--data", data4.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--hidden", "8",
        "--epochs", "1",
        "--batch-size", "4",
        "--seed", "11",
    ]);
    assert!(out.status.success());

    let data6 = tmp.path().join("six");
    let out = run(&[
        "synth",
        "--classes", "6",
        "--f-t", "6",
        "--f-a", "6",
        "--train-dialogues", "4",
        "--val-dialogues", "2",
        "--test-dialogues", "2",
        "--min-len", "3",
        "--max-len", "5",
        "--out", data6.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let out = run(&[
        "eval",
        "--checkpoint", run_dir.join("checkpoint-11.ckpt").to_str().unwrap(),
        "--data", data6.join("val.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
