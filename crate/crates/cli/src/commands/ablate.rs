use std::time::Instant;

use actmad_core::adapt::{
    adapt_stream, baseline_source, AdaptConfig, AlignmentReference, LayerMode, LossMode, ParamMode,
    StatMode,
};
use actmad_core::data::{build_cycle_stream, Condition, CycleSchedule, StreamBatch};
use actmad_core::model::Model;
use rayon::prelude::*;

use super::{load_artifacts, references, Paths};
use crate::report::{ensure_dir, float, write_csv, TimingLog};
use crate::ExperimentConfig;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_DETAIL_CSV: &str = "ablation_detail.csv";

/// Metric of one variant, averaged over the configured corruptions.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub batch_size: usize,
    pub effective_lr: Option<f64>,
    pub metric: f64,
    pub delta_vs_full: f64,
    /// Aggregate metric on each corruption, in config order.
    pub per_condition: Vec<f64>,
}

fn variants(cfg: &ExperimentConfig) -> Vec<(String, AdaptConfig)> {
    let full = cfg.adapt.clone();
    let with = |f: &dyn Fn(&mut AdaptConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    let mut out = vec![
        ("full".to_string(), full.clone()),
        (
            "last_layer_only".into(),
            with(&|c| c.layer_mode = LayerMode::LastLayerOnly),
        ),
        (
            "channel_averaged".into(),
            with(&|c| c.stat_mode = StatMode::ChannelAveraged),
        ),
        (
            "central_moment_difference".into(),
            with(&|c| {
                c.loss_mode = LossMode::CentralMomentDifference {
                    max_order: cfg.ablation.cmd_order,
                }
            }),
        ),
        (
            "affine_only".into(),
            with(&|c| c.param_mode = ParamMode::AffineOnly),
        ),
        (
            "cmd_order_2".into(),
            with(&|c| c.loss_mode = LossMode::CentralMomentDifference { max_order: 2 }),
        ),
    ];
    for &b in &cfg.ablation.batch_sizes {
        out.push((format!("batch_{b}"), with(&|c| c.batch_size = b)));
    }
    out
}

fn streams(
    cfg: &ExperimentConfig,
    test: &actmad_core::data::SyntheticDataset,
    batch: usize,
) -> anyhow::Result<Vec<Vec<StreamBatch>>> {
    cfg.data
        .corruptions
        .par_iter()
        .map(|&spec| {
            let schedule = CycleSchedule::single(Condition::Corrupted(spec), cfg.data.n_test);
            Ok(build_cycle_stream(
                test,
                &schedule,
                batch,
                cfg.data.stream_seed,
            )?)
        })
        .collect()
}

fn run(
    model: &Model,
    stream: &[StreamBatch],
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
) -> anyhow::Result<f64> {
    let mut adapted = model.clone();
    let report = adapt_stream(&mut adapted, stream, reference, cfg)?;
    Ok(report.aggregate().unwrap_or(f64::NAN))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The single-change variants of the alignment method and a batch-size sweep,
/// each adapted from the source model on every configured corruption.
pub fn ablate(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<Vec<AblationRow>> {
    if cfg.data.corruptions.is_empty() {
        return Err(crate::CliError::Config {
            path: "data.corruptions".into(),
            message: "the ablation needs at least one corruption".into(),
        }
        .into());
    }
    ensure_dir(&paths.out)?;
    let timing = TimingLog::new(&paths.out, "ablate");
    let clock = Instant::now();
    let (model, bundle) = load_artifacts(cfg, paths)?;
    let test = cfg.test_set()?;
    let variants = variants(cfg);
    let refs = references(
        cfg,
        &model,
        &bundle,
        &variants.iter().map(|(_, c)| c).collect::<Vec<_>>(),
    )?;

    // a sweep entry equal to another variant (the configured batch size) reuses its runs
    let first_equal: Vec<usize> = variants
        .iter()
        .map(|(_, c)| variants.iter().position(|(_, d)| d == c).expect("present"))
        .collect();
    let mut batch_sizes: Vec<usize> = variants.iter().map(|(_, c)| c.batch_size).collect();
    batch_sizes.sort_unstable();
    batch_sizes.dedup();
    let mut metrics: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    let mut source = Vec::new();
    for &b in &batch_sizes {
        let streams = streams(cfg, &test, b)?;
        if b == cfg.adapt.batch_size {
            source = streams
                .iter()
                .map(|s| Ok(baseline_source(&model, s)?.aggregate().unwrap_or(f64::NAN)))
                .collect::<anyhow::Result<_>>()?;
        }
        let jobs: Vec<(usize, usize)> = variants
            .iter()
            .enumerate()
            .filter(|&(v, (_, c))| c.batch_size == b && first_equal[v] == v)
            .flat_map(|(v, _)| (0..streams.len()).map(move |s| (v, s)))
            .collect();
        let results = jobs
            .par_iter()
            .map(|&(v, s)| run(&model, &streams[s], &refs[v], &variants[v].1))
            .collect::<anyhow::Result<Vec<_>>>()?;
        for (&(v, _), m) in jobs.iter().zip(results) {
            metrics[v].push(m);
        }
        timing.record(&format!("batch_size_{b}"), clock.elapsed())?;
    }

    for (v, &f) in first_equal.iter().enumerate() {
        if f != v {
            metrics[v] = metrics[f].clone();
        }
    }
    let full = mean(&metrics[0]);
    let mut rows = vec![AblationRow {
        variant: "source".into(),
        batch_size: cfg.adapt.batch_size,
        effective_lr: None,
        metric: mean(&source),
        delta_vs_full: mean(&source) - full,
        per_condition: source,
    }];
    for ((name, c), per) in variants.iter().zip(metrics) {
        let m = mean(&per);
        rows.push(AblationRow {
            variant: name.clone(),
            batch_size: c.batch_size,
            effective_lr: Some(c.effective_lr()),
            metric: m,
            delta_vs_full: m - full,
            per_condition: per,
        });
    }

    write_csv(
        &paths.out.join(ABLATION_CSV),
        &[
            "variant",
            "batch_size",
            "effective_lr",
            "metric",
            "delta_vs_full",
        ],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    r.batch_size.to_string(),
                    float(r.effective_lr),
                    float(Some(r.metric)),
                    float(Some(r.delta_vs_full)),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let detail: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            cfg.data
                .corruptions
                .iter()
                .zip(&r.per_condition)
                .map(|(spec, m)| {
                    vec![
                        r.variant.clone(),
                        spec.kind.to_string(),
                        spec.severity.to_string(),
                        float(Some(*m)),
                    ]
                })
        })
        .collect();
    write_csv(
        &paths.out.join(ABLATION_DETAIL_CSV),
        &["variant", "corruption", "severity", "metric"],
        &detail,
    )?;
    timing.record("total", clock.elapsed())?;

    for r in &rows {
        println!(
            "{:<28} bs {:>4} metric {:.4} delta {:+.4}",
            r.variant, r.batch_size, r.metric, r.delta_vs_full
        );
    }
    Ok(rows)
}
