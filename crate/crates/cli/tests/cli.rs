use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lws")).args(args).output().unwrap()
}

fn write_config(dir: &Path, input_dim: usize, extra: &str) -> String {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
            "lambda_theta": 2, "lambda_pi": 4, "eta_theta": 0.01, "eta_pi": 0.05,
            "k": 2, "batch_per_task": 4, "iterations": 4, "eval_interval": 2, "seed": 7,
            "repeats": 2,
            "architecture": {{"input_shape": [4], "layers": [
                {{"type": "dense", "inputs": 4, "outputs": 5}}, {{"type": "relu"}}
            ]}},
            "dataset": {{"synthetic": {{"teacher_groups": [0, 0, 1], "input_dim": {input_dim}, "classes": 3,
                "train_per_task": 20, "test_per_task": 20, "teacher_hidden": 4}}}}
            {extra}
        }}"#
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn compare_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 4, "");
    let out = dir.path().join("runs");
    let out_s = out.display().to_string();
    let res = lws(&["compare", "--config", &config, "--out", &out_s]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let modes = summary["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 3);
    for m in modes {
        for key in ["mode", "mean_test_error", "std_test_error", "p_vs_full", "p_vs_none", "effective_params"] {
            assert!(m.get(key).is_some(), "missing {key}");
        }
    }
    assert!(out.join("lws/seed_7/metrics.csv").is_file());
    assert!(out.join("no_sharing/seed_8/result.json").is_file());

    let res = lws(&["report", "--out", &out_s]);
    assert!(res.status.success());
    assert!(out.join("report/table.txt").is_file());
}

#[test]
fn train_single_mode_and_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 4, "");
    let out = dir.path().join("runs");
    let out_s = out.display().to_string();
    let res = lws(&["train", "--config", &config, "--out", &out_s, "--mode", "full", "--seed", "3"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("full_sharing/seed_3").is_dir());
    assert!(out.join("full_sharing/seed_4").is_dir());
    assert!(!out.join("lws").exists());

    let ckpt = out.join("full_sharing/seed_3/checkpoint.json").display().to_string();
    let res = lws(&["evaluate", "--config", &config, "--checkpoint", &ckpt]);
    assert!(res.status.success());
    let eval: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("full_sharing/seed_3/result.json")).unwrap()).unwrap();
    assert_eq!(eval["mean_error"], result["mean_test_error"]);
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 4, r#", "floor": 0.9"#);
    let res = lws(&["compare", "--config", &config]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));

    let res = lws(&["train", "--config", &dir.path().join("absent.json").display().to_string()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(
        &path,
        r#"{
            "lambda_theta": 2, "lambda_pi": 4, "eta_theta": 0.01, "eta_pi": 0.05, "k": 2, "iterations": 1,
            "architecture": {"input_shape": [4], "layers": [{"type": "dense", "inputs": 4, "outputs": 5}]},
            "dataset": {"idx": {"tasks": [{"name": "digits",
                "train_images": "nope-images", "train_labels": "nope-labels",
                "test_images": "nope-images", "test_labels": "nope-labels"}]}}
        }"#,
    )
    .unwrap();
    let res = lws(&["train", "--config", &path.display().to_string()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));

    let res = lws(&["report", "--out", &dir.path().join("empty").display().to_string()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn all_runs_failing_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // 6-dimensional inputs into a 4-input network
    let config = write_config(dir.path(), 6, "");
    let out = dir.path().join("runs").display().to_string();
    let res = lws(&["train", "--config", &config, "--out", &out]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
