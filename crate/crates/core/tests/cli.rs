//! Process-level CLI tests: subcommands, exit codes, checkpoint resume.

use std::path::Path;
use std::process::Command;

fn fdkt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fdkt"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
task = "data/task.json"
train_data = "data/train.jsonl"
test_data = "data/test.jsonl"
mode = "fdkt"
seeds = [4]
out_dir = "runs"

[dp]
sample_rate = 0.3
steps = 10

[synth]
per_label_count = 4

[filter]

[augment]
target_count = 30

[slm]
local_epochs = 4
augmented_epochs = 2

[gateway]
backend = "mock"
"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_task_then_staged_pipeline_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    let status = fdkt()
        .args(["gen-task", "--domain", "shopping", "--per-label-train", "6"])
        .args(["--per-label-test", "4", "--data-seed", "3"])
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(data_dir.join("task.json").exists());
    assert!(data_dir.join("train.jsonl").exists());

    let config = write_config(dir.path());

    // Individual stages chain their prerequisites.
    for stage in ["dp-train", "synth", "filter", "augment", "train-slm", "eval"] {
        let status = fdkt()
            .arg("--config")
            .arg(&config)
            .arg(stage)
            .current_dir(dir.path())
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0), "stage {stage} failed");
    }
    let seed_dir = dir.path().join("runs/run/seed4");
    for artifact in [
        "generator.model.json",
        "generator.ledger.json",
        "synthetic.jsonl",
        "filtered.jsonl",
        "augmented.jsonl",
        "slm.model.json",
        "report.json",
    ] {
        assert!(seed_dir.join(artifact).exists(), "missing {artifact}");
        let manifest = seed_dir.join(format!("{artifact}.manifest.json"));
        assert!(manifest.exists(), "missing manifest for {artifact}");
    }

    // Full pipeline over the same out dir reuses every checkpoint.
    let output = fdkt()
        .arg("--config")
        .arg(&config)
        .arg("pipeline")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let report_before = std::fs::read(seed_dir.join("report.json")).unwrap();

    let status = fdkt()
        .arg("--config")
        .arg(&config)
        .arg("pipeline")
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report_after = std::fs::read(seed_dir.join("report.json")).unwrap();
    assert_eq!(report_before, report_after);
}

#[test]
fn eval_without_model_exits_one_naming_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let status = fdkt()
        .args(["gen-task", "--domain", "shopping", "--per-label-train", "4"])
        .args(["--per-label-test", "3"])
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let config = write_config(dir.path());
    let output = fdkt()
        .arg("--config")
        .arg(&config)
        .arg("eval")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("slm.model.json"), "stderr: {stderr}");
    assert!(stderr.contains("train-slm"), "stderr: {stderr}");
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "mode = \"syn_ft\"\n[synth]\n").unwrap();
    let output = fdkt()
        .arg("--config")
        .arg(&config)
        .arg("pipeline")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("'dp'"), "stderr: {stderr}");
}

#[test]
fn federate_emits_cross_domain_report() {
    let dir = tempfile::tempdir().unwrap();
    for (domain, name) in [("shopping", "shop"), ("agnews", "news")] {
        let status = fdkt()
            .args(["gen-task", "--domain", domain, "--per-label-train", "5"])
            .args(["--per-label-test", "4", "--data-seed", "8"])
            .arg("--out")
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let config = dir.path().join("fed.toml");
    std::fs::write(
        &config,
        r#"
mode = "fdkt"
seeds = [2]
out_dir = "fedout"

[[clients]]
client_id = "shop"
task = "shop/task.json"
train_data = "shop/train.jsonl"
test_data = "shop/test.jsonl"

[[clients]]
client_id = "news"
task = "news/task.json"
train_data = "news/train.jsonl"
test_data = "news/test.jsonl"

[dp]
sample_rate = 0.4
steps = 8

[synth]
per_label_count = 4

[filter]

[augment]
target_count = 40

[slm]
augmented_epochs = 2

[gateway]
backend = "mock"
"#,
    )
    .unwrap();
    let status = fdkt()
        .arg("--config")
        .arg(&config)
        .arg("federate")
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("fedout/federate_report.json")).unwrap(),
    )
    .unwrap();
    // 2 clients -> a 2x2 matrix for both fdkt and the local baseline.
    assert_eq!(report["fdkt"].as_array().unwrap().len(), 4);
    assert_eq!(report["local"].as_array().unwrap().len(), 4);
    assert_eq!(report["prefixes"]["shop"], "[shopping] ");
    assert_eq!(report["prefixes"]["news"], "[agnews] ");
}
