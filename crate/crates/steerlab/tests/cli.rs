//! End-to-end checks of the command-line surface: exit codes, artifact
//! layout, and byte-level determinism of a rerun pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn steerlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
}

fn run(args: &[&str]) -> Output {
    steerlab().args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

/// Tiny config so CLI runs complete in seconds.
fn write_tiny_config(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("run_{seed}"));
    let json = format!(
        r#"{{
  "world": "gauss2d_gender",
  "schedule": {{ "t_steps": 60, "beta_start": 0.001, "beta_end": 0.16, "k_steps": 12 }},
  "network": {{ "data_dim": 2, "bottleneck": 8, "hidden": 12, "prompt_dim": 4, "time_dim": 4 }},
  "pretrain": {{ "dataset_size": 300, "epochs": 3, "batch": 32, "lr": 0.002, "uncond_dropout": 0.1 }},
  "steer": {{ "iterations": 12, "lr": 0.01, "lambda": 0.02, "t_max": 12, "kind": "constant" }},
  "guidance": {{ "scale": 1.5 }},
  "policy": {{ "stop_below": 3 }},
  "seed": {seed},
  "out_dir": "{}"
}}"#,
        out.display()
    );
    let path = dir.join(format!("config_{seed}.json"));
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let output = run(&["pretrain", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("not found"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "world": "gauss2d_gender", "seed": 1, "typo_key": 3 }"#).unwrap();
    let output = run(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&output), 2);
}

#[test]
fn unknown_concept_exits_2_and_missing_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 5);
    let config = config.to_str().unwrap();

    // Steering before pretraining: the checkpoint is missing.
    let output = run(&["steer", "--config", config, "--concept", "woman"]);
    assert_eq!(code(&output), 3, "{}", String::from_utf8_lossy(&output.stderr));

    let output = run(&["pretrain", "--config", config]);
    assert_eq!(code(&output), 0, "{}", String::from_utf8_lossy(&output.stderr));

    let output = run(&["steer", "--config", config, "--concept", "nonexistent"]);
    assert_eq!(code(&output), 2);

    // Fair generation without trained transformations.
    let output = run(&["generate", "--config", config, "--mode", "fair", "--n", "4"]);
    assert_eq!(code(&output), 3);
}

#[test]
fn eval_on_empty_run_dir_exits_3_with_missing_list() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["eval", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(code(&output), 3);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config.json"), "{stderr}");
}

#[test]
fn zero_sample_generation_emits_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 9);
    let config = config.to_str().unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", config])), 0);
    let output = run(&["generate", "--config", config, "--mode", "base", "--n", "0"]);
    assert_eq!(code(&output), 0);
    let csv = std::fs::read_to_string(dir.path().join("run_9/samples/base.csv")).unwrap();
    assert_eq!(csv, "x0,x1,drawn_concept,oracle_label\n");
}

fn snapshot_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn rerun_pipeline_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 13);
    let config = config.to_str().unwrap();
    let run_dir = dir.path().join("run_13");

    let full_run = || {
        assert_eq!(code(&run(&["pretrain", "--config", config])), 0);
        assert_eq!(code(&run(&["steer", "--config", config, "--all"])), 0);
        assert_eq!(
            code(&run(&["generate", "--config", config, "--mode", "base", "--n", "12"])),
            0
        );
        assert_eq!(
            code(&run(&["generate", "--config", config, "--mode", "fair", "--n", "12"])),
            0
        );
        assert_eq!(code(&run(&["eval", "--run", run_dir.to_str().unwrap()])), 0);
    };

    full_run();
    let first = snapshot_tree(&run_dir);
    std::fs::remove_dir_all(&run_dir).unwrap();
    full_run();
    let second = snapshot_tree(&run_dir);

    assert_eq!(first.len(), second.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in first.iter().zip(&second) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "artifact {name_a} differs between reruns");
    }
}

#[test]
fn concept_only_flag_emits_concept_file_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 21);
    let config = config.to_str().unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", config])), 0);
    let output = run(&[
        "steer",
        "--config",
        config,
        "--concept",
        "woman",
        "--concept-only",
    ]);
    assert_eq!(code(&output), 0);
    let dir = dir.path().join("run_21/transformations/concept_only");
    assert!(dir.join("woman.concept.trf").exists());
    assert!(!dir.join("woman.semantic.trf").exists());

    // Shared flag emits a single shared file.
    let output = run(&["steer", "--config", config, "--concept", "woman", "--shared"]);
    assert_eq!(code(&output), 0);
    let shared = dir.parent().unwrap().join("shared/woman.shared.trf");
    assert!(shared.exists());
}
