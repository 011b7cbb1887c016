use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use actmad_cli::report::read_csv;
use actmad_cli::{EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use serde_json::json;
use tempfile::TempDir;

fn tiny_config() -> serde_json::Value {
    json!({
        "model": {"input_resolution": [16, 16], "in_channels": 1, "channels": [4, 8],
                  "blocks_per_stage": 1, "head": "classify", "n_classes": 4, "seed": 0},
        "train": {"epochs": 1, "lr": 0.05, "batch_size": 32, "seed": 0},
        "stats": {"batch_size": 50},
        "adapt": {"lr": 1e-6, "batch_size": 16},
        "data": {
            "task": "classification", "seed": 1, "n_train": 96, "n_test": 32, "clean_pass": true,
            "corruptions": [{"kind": "fog", "severity": 5, "seed": 3},
                            {"kind": "gaussian_noise", "severity": 3, "seed": 3}],
            "cycle": {"segments": [
                {"condition": "clean", "n_images": 32},
                {"condition": {"corrupted": {"kind": "fog", "severity": 5, "seed": 3}}, "n_images": 32},
                {"condition": "clean", "n_images": 32}]}
        },
        "ablation": {"cmd_order": 3, "batch_sizes": [8, 16]}
    })
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(config: serde_json::Value) -> Self {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        Workspace { dir, config: path }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, command: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_actmad"))
            .arg(command)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .args(extra)
            .output()
            .unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn header(path: &Path) -> Vec<String> {
    read_csv(path).unwrap().0
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = Command::new(env!("CARGO_BIN_EXE_actmad"))
            .arg(flag)
            .output()
            .unwrap();
        assert_eq!(code(&out), EXIT_OK, "{flag}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_actmad"))
        .arg("fly")
        .output()
        .unwrap();
    assert_eq!(code(&out), EXIT_USAGE);
}

#[test]
fn invalid_config_names_the_offending_field() {
    let mut cfg = tiny_config();
    cfg["adapt"]["batch_size"] = json!(0);
    let out = Workspace::new(cfg).run("train", &[]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(stderr(&out).contains("`adapt`"), "{}", stderr(&out));

    let mut cfg = tiny_config();
    cfg["adapt"]["learning_rate"] = json!(1.0);
    let out = Workspace::new(cfg).run("train", &[]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn bad_override_is_a_usage_error() {
    let ws = Workspace::new(tiny_config());
    let out = ws.run("train", &["--set", "no_equals_sign"]);
    assert_eq!(code(&out), EXIT_USAGE);
    let out = ws.run("train", &["--set", "train.epochs=\"many\""]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(stderr(&out).contains("train.epochs"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_actmad"))
        .args(["train", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), EXIT_USAGE);
}

#[test]
fn diverging_training_is_a_numerical_failure() {
    let mut cfg = tiny_config();
    cfg["train"]["lr"] = json!(1e200);
    let out = Workspace::new(cfg).run("train", &[]);
    assert_eq!(code(&out), EXIT_NUMERICAL, "{}", stderr(&out));
}

#[test]
fn missing_or_damaged_checkpoint_is_an_io_failure() {
    let ws = Workspace::new(tiny_config());
    let out = ws.run("stats", &[]);
    assert_eq!(code(&out), EXIT_IO, "{}", stderr(&out));

    fs::create_dir_all(ws.out()).unwrap();
    fs::write(ws.out().join("model.ckpt"), b"not a checkpoint").unwrap();
    let out = ws.run("stats", &[]);
    assert_eq!(code(&out), EXIT_IO, "{}", stderr(&out));
}

#[test]
fn full_command_sequence_writes_every_artifact() {
    let ws = Workspace::new(tiny_config());
    for cmd in ["train", "stats", "adapt", "cycle", "ablate"] {
        let out = ws.run(cmd, &[]);
        assert_eq!(code(&out), EXIT_OK, "{cmd}: {}", stderr(&out));
    }
    let out = ws.out();
    for file in [
        "model.ckpt",
        "stats.bin",
        "train_report.json",
        "adapt_report.jsonl",
        "cycle_report.jsonl",
        "timing.log",
    ] {
        assert!(out.join(file).is_file(), "{file}");
    }
    assert_eq!(
        header(&out.join("adapt_summary.csv")),
        [
            "condition",
            "severity",
            "source",
            "norm",
            "entropy",
            "actmad",
            "mean_alignment_loss",
            "relative_drift"
        ]
    );
    let (_, rows) = read_csv(&out.join("adapt_summary.csv")).unwrap();
    let conditions: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(conditions, ["clean", "fog", "gaussian_noise"]);

    let (h, trace) = read_csv(&out.join("cycle_trace.csv")).unwrap();
    assert_eq!(
        h,
        [
            "batch",
            "segment",
            "condition",
            "n_images",
            "source",
            "actmad",
            "loss",
            "drift",
            "adapted"
        ]
    );
    assert_eq!(trace.len(), 6);
    let (_, summary) = read_csv(&out.join("cycle_summary.csv")).unwrap();
    assert_eq!(summary.len(), 3);

    let (h, ablation) = read_csv(&out.join("ablation.csv")).unwrap();
    assert_eq!(
        h,
        [
            "variant",
            "batch_size",
            "effective_lr",
            "metric",
            "delta_vs_full"
        ]
    );
    let variants: Vec<&str> = ablation.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        variants,
        [
            "source",
            "full",
            "last_layer_only",
            "channel_averaged",
            "central_moment_difference",
            "affine_only",
            "cmd_order_2",
            "batch_8",
            "batch_16"
        ]
    );
    // the sweep entry at the configured batch size is the full method
    assert_eq!(ablation[1][3], ablation[8][3]);
    let (_, detail) = read_csv(&out.join("ablation_detail.csv")).unwrap();
    assert_eq!(detail.len(), variants.len() * 2);
}

#[test]
fn stats_from_another_model_are_rejected() {
    let ws = Workspace::new(tiny_config());
    for cmd in ["train", "stats"] {
        assert_eq!(code(&ws.run(cmd, &[])), EXIT_OK);
    }
    let other = ws.dir.path().join("other.ckpt");
    let retrain = ws.run(
        "train",
        &[
            "--set",
            "model.seed=5",
            "--checkpoint",
            other.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&retrain), EXIT_OK, "{}", stderr(&retrain));
    let out = ws.run(
        "adapt",
        &[
            "--set",
            "model.seed=5",
            "--checkpoint",
            other.to_str().unwrap(),
        ],
    );
    assert_ne!(code(&out), EXIT_OK);
    assert!(
        stderr(&out).contains("statistics were computed for model"),
        "{}",
        stderr(&out)
    );
}
