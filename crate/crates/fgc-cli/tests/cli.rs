//! End-to-end command-line behavior: exit codes, help, and the
//! train -> eval -> analyze -> export pipeline on a tiny run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fgc"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fgc_cli_{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = r#"
epochs = 2
batch_size = 8
seed = 11
k = 4

[network]
input_channels = 1
input_size = 8
classes = 2

[[network.layers]]
type = "conv"
channels = 4
kernel = 4
stride = 2
padding = 1
gated = true

[[network.layers]]
type = "conv"
channels = 6
kernel = 3
gated = true
fgc = true

[optimizer]
lr = 0.05
momentum = 0.9

[dataset]
kind = "synth"
classes = 2
train_per_class = 10
test_per_class = 5
image_size = 8
noise_sigma = 0.3
seed = 21
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let out = run(bin().args(["train", "--config", "missing_config_xyz.toml"]));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing_config_xyz.toml"), "{stderr}");
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["analyze", "--help"],
        vec!["export-dataset", "--help"],
    ] {
        let out = run(bin().args(&args));
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = run(bin().args(["train", "--banana"]));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn train_eval_analyze_pipeline() {
    let dir = workdir("pipeline");
    let config = write_config(&dir);
    let out_dir = dir.join("out");

    let out = run(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = out_dir.join("checkpoint.fgck");
    assert!(ckpt.exists());
    let log = fs::read_to_string(out_dir.join("log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["epoch"].is_number());
        assert!(v["eval_error"].is_number());
    }

    // Eval prints a metrics record.
    let out = run(bin().args(["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval prints one JSON record");
    assert!(record["error"].as_f64().unwrap() >= 0.0);
    assert!(record["pruning_ratio"].is_number());

    // Forced-open eval reports zero pruning.
    let out = run(bin().args([
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--force-open",
    ]));
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(record["pruning_ratio"].as_f64().unwrap().abs() < 1e-12);

    // Analyze writes the report bundle.
    let analysis_dir = dir.join("analysis");
    let out = run(bin().args([
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--queries",
        "3",
        "--out",
        analysis_dir.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "frequencies.csv",
        "gate_ranking.csv",
        "analysis.json",
        "features_layer1.csv",
        "gates_layer1.csv",
        "neighbors_layer1.csv",
    ] {
        assert!(analysis_dir.join(file).exists(), "{file}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["nmi"]["1"]["feature_gate"].is_number());
}

#[test]
fn training_is_deterministic_per_seed_and_resumable() {
    let dir = workdir("determinism");
    let config = write_config(&dir);

    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let st = run(bin().args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(st.status.code(), Some(0));
    }
    let log_a = fs::read(out_a.join("log.ndjson")).unwrap();
    let log_b = fs::read(out_b.join("log.ndjson")).unwrap();
    assert_eq!(log_a, log_b, "same (config, seed) must give identical logs");
    let ckpt_a = fs::read(out_a.join("checkpoint.fgck")).unwrap();
    let ckpt_b = fs::read(out_b.join("checkpoint.fgck")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);

    // Seed override changes the run.
    let out_c = dir.join("c");
    let st = run(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "999",
        "--out",
        out_c.to_str().unwrap(),
    ]));
    assert_eq!(st.status.code(), Some(0));
    assert_ne!(fs::read(out_c.join("log.ndjson")).unwrap(), log_a);
}

#[test]
fn export_dataset_round_trips_through_idx() {
    let dir = workdir("export");
    let config = write_config(&dir);
    let out_dir = dir.join("data");
    let st = run(bin().args([
        "export-dataset",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let train = fgc::data::read_idx(
        &out_dir.join("train-images.idx"),
        &out_dir.join("train-labels.idx"),
    )
    .unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(train.height, 8);
    let test = fgc::data::read_idx(
        &out_dir.join("test-images.idx"),
        &out_dir.join("test-labels.idx"),
    )
    .unwrap();
    assert_eq!(test.len(), 10);
}
