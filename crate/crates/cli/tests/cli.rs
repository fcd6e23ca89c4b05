//! End-to-end tests of the `ddc` binary: exit codes, determinism, and
//! artifact round trips, on configs small enough to run in seconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ddc")
}

fn tiny_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "seed": 3,
        "image_size": 16,
        "schedule": { "t": 40, "beta_start": 0.001, "beta_end": 0.15 },
        "solve_steps": 3,
        "task": { "task": "super_res", "factor": 4, "kernel": "average_pool" },
        "sigma_y": 0.0,
        "denoiser_net": { "widths": [8, 16], "blocks_per_level": 1, "groups": 2, "time_embed_dim": 16 },
        "consistency_net": { "widths": [8, 16], "blocks_per_level": 1, "groups": 2, "time_embed_dim": 16 },
        "train_denoiser": { "steps": 25, "batch_size": 2, "optimizer": { "lr": 0.002 } },
        "train_ddc": { "steps": 8, "batch_size": 1, "grad_accum": 2, "optimizer": { "lr": 0.001 } },
        "eval_images": 2,
        "synthetic": 3,
        "denoiser_checkpoint": out_dir.join("denoiser.ddck"),
        "ddc_checkpoint": out_dir.join("ddc.ddck"),
        "out_dir": out_dir
    })
}

fn write_config(dir: &Path, cfg: &serde_json::Value) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DDC_THREADS")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn missing_dataset_dir_is_a_validation_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let mut cfg = tiny_config(&out_dir);
    cfg["dataset"] = serde_json::json!(tmp.path().join("nowhere"));
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = run(&["train-denoiser", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere"), "stderr should name the path: {stderr}");
}

#[test]
fn training_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &tiny_config(&out_dir));
    let cfg = cfg_path.to_str().unwrap();

    assert_ok(&run(&["train-denoiser", "--config", cfg]));
    let first_log = read(&out_dir.join("denoiser_loss.jsonl"));
    let first_ck = read(&out_dir.join("denoiser.ddck"));
    assert_ok(&run(&["train-denoiser", "--config", cfg]));
    assert_eq!(first_log, read(&out_dir.join("denoiser_loss.jsonl")));
    assert_eq!(first_ck, read(&out_dir.join("denoiser.ddck")));

    assert_ok(&run(&["train-ddc", "--config", cfg]));
    let first_ddc_log = read(&out_dir.join("ddc_loss.jsonl"));
    let first_ddc_ck = read(&out_dir.join("ddc.ddck"));
    assert_ok(&run(&["train-ddc", "--config", cfg]));
    assert_eq!(first_ddc_log, read(&out_dir.join("ddc_loss.jsonl")));
    assert_eq!(first_ddc_ck, read(&out_dir.join("ddc.ddck")));
}

#[test]
fn solve_is_deterministic_and_thread_count_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &tiny_config(&out_dir));
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["train-denoiser", "--config", cfg]));
    assert_ok(&run(&["train-ddc", "--config", cfg]));

    assert_ok(&run(&["solve", "--config", cfg]));
    let report = read(&out_dir.join("report.json"));
    let png = read(&out_dir.join("restored_synthetic_0000.png"));

    assert_ok(&run(&["solve", "--config", cfg]));
    assert_eq!(report, read(&out_dir.join("report.json")));
    assert_eq!(png, read(&out_dir.join("restored_synthetic_0000.png")));

    // A different worker count must not change anything.
    let threaded = Command::new(bin())
        .args(["solve", "--config", cfg])
        .env("RUST_LOG", "warn")
        .env("DDC_THREADS", "2")
        .output()
        .unwrap();
    assert_ok(&threaded);
    assert_eq!(report, read(&out_dir.join("report.json")));
    assert_eq!(png, read(&out_dir.join("restored_synthetic_0000.png")));

    // A different seed must.
    assert_ok(&run(&["solve", "--config", cfg, "--seed", "4"]));
    assert_ne!(report, read(&out_dir.join("report.json")));
}

#[test]
fn corrupt_checkpoints_exit_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &tiny_config(&out_dir));
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["train-denoiser", "--config", cfg]));

    // Truncate the file mid-payload.
    let ck_path = out_dir.join("denoiser.ddck");
    let bytes = read(&ck_path);
    std::fs::write(&ck_path, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&["train-ddc", "--config", cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Flip the magic.
    let mut garbled = bytes.clone();
    garbled[0] ^= 0xff;
    std::fs::write(&ck_path, &garbled).unwrap();
    let out = run(&["train-ddc", "--config", cfg]);
    assert_eq!(out.status.code(), Some(4));

    // A missing checkpoint is a config problem, not a corrupt file.
    std::fs::remove_file(&ck_path).unwrap();
    let out = run(&["train-ddc", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nonlinear_task_rejects_the_linear_only_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let mut cfg = tiny_config(&out_dir);
    cfg["task"] = serde_json::json!({ "task": "jpeg", "quality": 10 });
    let cfg_path = write_config(tmp.path(), &cfg);
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["train-denoiser", "--config", cfg]));
    let out = run(&["solve", "--config", cfg, "--strategy", "ddnm"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_fields_and_bad_flags_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let mut cfg = tiny_config(&out_dir);
    cfg["not_a_field"] = serde_json::json!(1);
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = run(&["solve", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["solve", "--config", "/does/not/exist.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin())
        .args(["solve", "--config", cfg_path.to_str().unwrap()])
        .env("DDC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn step_override_reaches_the_sampler_and_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &tiny_config(&out_dir));
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["train-denoiser", "--config", cfg, "--steps", "5"]));
    let lines = std::fs::read_to_string(out_dir.join("denoiser_loss.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);

    assert_ok(&run(&["train-ddc", "--config", cfg]));
    assert_ok(&run(&["solve", "--config", cfg, "--steps", "2"]));
    let report: serde_json::Value =
        serde_json::from_slice(&read(&out_dir.join("report.json"))).unwrap();
    assert_eq!(report["steps"], 2);
}
