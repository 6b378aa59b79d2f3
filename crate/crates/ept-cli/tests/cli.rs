//! End-to-end CLI tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn ept(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ept"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_quick_config(dir: &Path) -> std::path::PathBuf {
    // a fast two-task run: 8 steps total
    let cfg = r#"{
        "batch_size": 4,
        "epochs": 2,
        "max_seq_len": 3,
        "warmup_steps": 2,
        "lora_rank": 2,
        "expert_kernel_sizes": [1, 2],
        "vocab_size": 8,
        "d_model": 4,
        "n_blocks": 1,
        "ffn_dim": 8,
        "eval_samples": 4,
        "tasks": [
            {"family": 0, "rank": 1, "classes": 2, "samples": 8},
            {"family": 1, "rank": 4, "classes": 2, "samples": 8}
        ]
    }"#;
    let path = dir.join("quick.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn params_reproduces_the_published_counts() {
    let out = ept(&["params", "--d", "768", "--r", "8", "--experts", "8",
        "--scales", "2,2,4,4,6,6,8,8", "--dsub", "384"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("6384"), "{text}");
    assert!(text.contains("98304"), "{text}");
    assert!(text.contains("12288"), "{text}");

    let out = ept(&["params", "--json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["ept_total"], 6384);
    assert_eq!(v["moe_lora_baseline"], 98304);
    assert_eq!(v["shared_lora_baseline"], 12288);
}

#[test]
fn params_validates_inputs_with_exit_code_2() {
    let out = ept(&["params", "--experts", "3", "--scales", "2,2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ept(&["params", "--scales", "0,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_the_miniature_config() {
    let out = ept(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("max relative error"));
}

#[test]
fn train_eval_analyze_merge_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_quick_config(dir.path());
    let out_dir = dir.path().join("run");

    let out = ept(&["train", "--config", cfg.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("routing.csv").exists());
    let ckpt = out_dir.join("checkpoint");
    assert!(ckpt.join("manifest.json").exists());
    assert!(ckpt.join("tensors.bin").exists());

    let routing = std::fs::read_to_string(out_dir.join("routing.csv")).unwrap();
    assert!(routing.starts_with("task,expert,count,fraction\n"));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert!(first["l_total"].is_f64());

    let out = ept(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("task accuracy"));

    let out = ept(&["analyze", "routing", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(ckpt.join("routing.csv").exists());

    let out = ept(&["analyze", "embeddings", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(ckpt.join("embeddings.csv").exists());
    // two tasks: PCA section must be omitted with a notice
    assert!(!ckpt.join("embeddings_pca.csv").exists());
    assert!(stdout(&out).contains("PCA"));

    let merged_dir = dir.path().join("merged");
    let out = ept(&["merge", "--checkpoint", ckpt.to_str().unwrap(),
        "--policy", "per_task_mean", "--out", merged_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(merged_dir.join("manifest.json").exists());

    let fixed_dir = dir.path().join("merged_fixed");
    let out = ept(&["merge", "--checkpoint", ckpt.to_str().unwrap(),
        "--policy", "fixed", "--gates", "0.5,0.5", "--out", fixed_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // fixed policy without gates is a validation error
    let out = ept(&["merge", "--checkpoint", ckpt.to_str().unwrap(),
        "--policy", "fixed", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_matches_uninterrupted_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_quick_config(dir.path());

    let full_dir = dir.path().join("full");
    let out = ept(&["train", "--config", cfg.to_str().unwrap(),
        "--out", full_dir.to_str().unwrap()]);
    assert!(out.status.success());

    // a second identical run must produce a bitwise-identical metrics log
    let again_dir = dir.path().join("again");
    let out = ept(&["train", "--config", cfg.to_str().unwrap(),
        "--out", again_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let full = std::fs::read(full_dir.join("metrics.jsonl")).unwrap();
    let again = std::fs::read(again_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(full, again);

    // resume from the finished checkpoint: no further steps, still succeeds
    let resumed_dir = dir.path().join("resumed");
    let out = ept(&["train", "--config", cfg.to_str().unwrap(),
        "--out", resumed_dir.to_str().unwrap(),
        "--resume", full_dir.join("checkpoint").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_produces_a_comparative_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_quick_config(dir.path());
    let out_path = dir.path().join("ablation.json");
    let out = ept(&["ablate", "--config", cfg.to_str().unwrap(),
        "--toggles", "ab_init", "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_path).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["ab_init"], true);
    assert_eq!(rows[1]["ab_init"], false);
    assert_eq!(rows[1]["top_k"], true);

    let out = ept(&["ablate", "--config", cfg.to_str().unwrap(), "--toggles", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = ept(&["train", "--config", "/nonexistent.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}
