//! Drives the command-line binary end to end through its four
//! subcommands — generate → train → evaluate → ablate — over real files
//! in a temp directory, plus the error paths a user is most likely to hit.

use std::path::Path;
use std::process::{Command, Output};

use moe_asr::harness::optim::AdamWConfig;
use moe_asr::harness::synth::SyntheticTask;
use moe_asr::harness::train::TrainConfig;
use moe_asr::models::ModelConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-asr"))
}

fn run_ok(cmd: &mut Command) -> String {
    let Output { status, stdout, stderr } = cmd.output().expect("spawn binary");
    assert!(
        status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&stdout),
        String::from_utf8_lossy(&stderr)
    );
    String::from_utf8(stdout).unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn tiny_task() -> SyntheticTask {
    SyntheticTask {
        num_languages: 2,
        vocab_size: 6,
        feature_dim: 6,
        noise_scale: 0.1,
        min_targets: 1,
        max_targets: 3,
        min_repeats: 4,
        max_repeats: 6,
        seed: 41,
    }
}

fn tiny_train_config() -> TrainConfig {
    let mut model = ModelConfig::tt_desk(6, 6);
    model.blank_id = 6;
    TrainConfig {
        model,
        optimizer: AdamWConfig {
            lr: 1e-3,
            warmup_steps: 5,
            ..AdamWConfig::default()
        },
        batch_size: 4,
        max_steps: 10,
        eval_every: 0,
        seed: 0,
        label_smoothing: 0.0,
        balance_temperature: 0.5,
    }
}

#[test]
fn generate_train_evaluate_ablate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let task_path = dir.path().join("task.json");
    let corpus_path = dir.path().join("corpus.json");
    write_json(&task_path, &tiny_task());

    // generate: task JSON → corpus JSON.
    let out = run_ok(bin().args([
        "generate",
        "--task",
        task_path.to_str().unwrap(),
        "--num",
        "48",
        "--output",
        corpus_path.to_str().unwrap(),
    ]));
    assert!(out.contains("48 utterances"), "{out}");
    let corpus: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&corpus_path).unwrap()).unwrap();
    assert_eq!(corpus["utterances"].as_array().unwrap().len(), 48);

    // train: config + corpus → metrics.jsonl + checkpoints, with a
    // dotted-path override exercised on the way in.
    let cfg_path = dir.path().join("train.json");
    write_json(&cfg_path, &tiny_train_config());
    let run_dir = dir.path().join("run");
    let out = run_ok(bin().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--corpus",
        corpus_path.to_str().unwrap(),
        "--output-dir",
        run_dir.to_str().unwrap(),
        "--seed",
        "3",
        "--set",
        "optimizer.warmup_steps=2",
    ]));
    assert!(out.contains("trained 10 steps"), "{out}");
    let ckpt = run_dir.join("checkpoint-final.bin");
    assert!(ckpt.is_file());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
    for line in metrics.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["total_loss"].as_f64().unwrap().is_finite());
    }

    // evaluate: checkpoint + corpus → report JSON.
    let report_path = dir.path().join("report.json");
    let out = run_ok(bin().args([
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus_path.to_str().unwrap(),
        "--output",
        report_path.to_str().unwrap(),
    ]));
    assert!(out.contains("overall token error rate"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let rate = report["overall_error_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate), "error rate {rate} out of range");
    assert_eq!(report["per_language"].as_object().unwrap().len(), 2);

    // ablate: two-entry grid → ablation.csv plus per-entry run dirs.
    let grid_path = dir.path().join("grid.json");
    let mut dense_cfg = tiny_train_config();
    dense_cfg.model.moe_every = 0;
    write_json(
        &grid_path,
        &serde_json::json!([
            { "name": "tt-moe", "config": tiny_train_config() },
            { "name": "tt-dense", "config": dense_cfg },
        ]),
    );
    let ablate_dir = dir.path().join("ablation");
    let out = run_ok(bin().args([
        "ablate",
        "--grid",
        grid_path.to_str().unwrap(),
        "--train-corpus",
        corpus_path.to_str().unwrap(),
        "--eval-corpus",
        corpus_path.to_str().unwrap(),
        "--output-dir",
        ablate_dir.to_str().unwrap(),
        "--seed",
        "5",
    ]));
    assert!(out.contains("tt-moe") && out.contains("tt-dense"), "{out}");
    let csv = std::fs::read_to_string(ablate_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + one row per entry:\n{csv}");
    assert!(csv.lines().next().unwrap().contains("model"));
    assert!(ablate_dir.join("tt-moe").join("checkpoint-final.bin").is_file());
    assert!(ablate_dir.join("tt-dense").join("metrics.jsonl").is_file());
}

#[test]
fn evaluate_rejects_mismatched_feature_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let task_path = dir.path().join("task.json");
    let corpus_path = dir.path().join("corpus.json");
    let cfg_path = dir.path().join("train.json");
    let run_dir = dir.path().join("run");
    write_json(&task_path, &tiny_task());
    run_ok(bin().args([
        "generate", "--task", task_path.to_str().unwrap(),
        "--num", "8",
        "--output", corpus_path.to_str().unwrap(),
    ]));
    write_json(&cfg_path, &tiny_train_config());
    run_ok(bin().args([
        "train",
        "--config", cfg_path.to_str().unwrap(),
        "--corpus", corpus_path.to_str().unwrap(),
        "--output-dir", run_dir.to_str().unwrap(),
        "--seed", "0",
    ]));

    // A corpus whose frames are 8-dimensional against a d_feat-6 model.
    let mut wide_task = tiny_task();
    wide_task.feature_dim = 8;
    let wide_path = dir.path().join("wide.json");
    write_json(&task_path, &wide_task);
    run_ok(bin().args([
        "generate", "--task", task_path.to_str().unwrap(),
        "--num", "8",
        "--output", wide_path.to_str().unwrap(),
    ]));

    let output = bin()
        .args([
            "evaluate",
            "--checkpoint",
            run_dir.join("checkpoint-final.bin").to_str().unwrap(),
            "--corpus",
            wide_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("8-dimensional"), "stderr: {stderr}");
}

#[test]
fn train_rejects_malformed_override() {
    let dir = tempfile::tempdir().unwrap();
    let task_path = dir.path().join("task.json");
    let corpus_path = dir.path().join("corpus.json");
    let cfg_path = dir.path().join("train.json");
    write_json(&task_path, &tiny_task());
    run_ok(bin().args([
        "generate", "--task", task_path.to_str().unwrap(),
        "--num", "8",
        "--output", corpus_path.to_str().unwrap(),
    ]));
    write_json(&cfg_path, &tiny_train_config());

    let output = bin()
        .args([
            "train",
            "--config", cfg_path.to_str().unwrap(),
            "--corpus", corpus_path.to_str().unwrap(),
            "--output-dir", dir.path().join("run").to_str().unwrap(),
            "--seed", "0",
            "--set", "optimizer-lr-no-equals-sign",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("key.path=value"), "stderr: {stderr}");
}
