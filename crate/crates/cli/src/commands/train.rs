use std::time::Instant;

use actmad_core::model::{build_model, save_checkpoint, Head};
use actmad_core::stats::{compute_training_stats, save_stats, StatsBundle};
use actmad_core::train::train_model;
use serde::Serialize;

use super::{load_model, Paths};
use crate::report::{ensure_dir, write_text, TimingLog};
use crate::ExperimentConfig;

pub const TRAIN_REPORT: &str = "train_report.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    /// "accuracy" or "mse".
    pub metric_name: &'static str,
    pub clean_metric: f64,
    pub epoch_loss: Vec<f64>,
}

pub fn train(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<TrainOutcome> {
    ensure_dir(&paths.out)?;
    let timing = TimingLog::new(&paths.out, "train");
    let clock = Instant::now();
    let mut model = build_model(&cfg.model)?;
    let train_set = cfg.train_set()?;
    let report = train_model(&mut model, &train_set, &cfg.train)?;
    let test = cfg.test_set()?;
    let (metric_name, clean_metric) = match model.head() {
        Head::Classify => ("accuracy", model.accuracy(&test)?),
        Head::Regress => ("mse", model.regression_mse(&test)?),
    };
    if let Some(dir) = paths
        .checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
    {
        ensure_dir(dir)?;
    }
    save_checkpoint(&model, &paths.checkpoint)?;
    let outcome = TrainOutcome {
        metric_name,
        clean_metric,
        epoch_loss: report.epoch_loss,
    };
    write_text(
        &paths.out.join(TRAIN_REPORT),
        &(serde_json::to_string_pretty(&outcome)? + "\n"),
    )?;
    timing.record("train", clock.elapsed())?;
    println!("clean test {metric_name}: {clean_metric:.16e}");
    Ok(outcome)
}

pub fn stats(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<StatsBundle> {
    ensure_dir(&paths.out)?;
    let timing = TimingLog::new(&paths.out, "stats");
    let clock = Instant::now();
    let (model, fingerprint) = load_model(cfg, paths)?;
    let bundle = compute_training_stats(&model, &cfg.train_set()?, cfg.stats.batch_size)?;
    bundle.check_model(&model, Some(fingerprint))?;
    if let Some(dir) = paths.stats.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_stats(&bundle, &paths.stats)?;
    timing.record("stats", clock.elapsed())?;
    for layer in &bundle.layers {
        let [c, h, w] = layer.shape;
        println!(
            "{:<12} {c}x{h}x{w}  samples {}",
            layer.layer_id, layer.n_samples
        );
    }
    Ok(bundle)
}
