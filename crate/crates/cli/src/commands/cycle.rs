use std::time::Instant;

use actmad_core::adapt::{adapt_stream, baseline_source, AdaptReport};
use actmad_core::data::build_cycle_stream;

use super::{load_artifacts, references, tag_lines, Paths};
use crate::report::{ensure_dir, float, write_csv, write_text, TimingLog};
use crate::{CliError, ExperimentConfig};

pub const CYCLE_TRACE_CSV: &str = "cycle_trace.csv";
pub const CYCLE_SUMMARY_CSV: &str = "cycle_summary.csv";
pub const CYCLE_JSONL: &str = "cycle_report.jsonl";

#[derive(Clone, Debug)]
pub struct CycleOutcome {
    pub source: AdaptReport,
    pub actmad: AdaptReport,
    /// Condition label of each segment.
    pub segments: Vec<String>,
}

impl CycleOutcome {
    /// Mean metric of ActMAD over segment `s`.
    pub fn segment_metric(&self, s: usize) -> Option<f64> {
        self.actmad.segment_aggregate(s)
    }
}

/// One continuous pass over the schedule in `data.cycle`, never resetting.
pub fn cycle(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<CycleOutcome> {
    let schedule = cfg.data.cycle.as_ref().ok_or_else(|| CliError::Config {
        path: "data.cycle".into(),
        message: "the cycle command needs a segment schedule".into(),
    })?;
    ensure_dir(&paths.out)?;
    let timing = TimingLog::new(&paths.out, "cycle");
    let clock = Instant::now();
    let (model, bundle) = load_artifacts(cfg, paths)?;
    let reference = references(cfg, &model, &bundle, &[&cfg.adapt])?.remove(0);
    let test = cfg.test_set()?;
    let stream = build_cycle_stream(&test, schedule, cfg.adapt.batch_size, cfg.data.stream_seed)?;
    let source = baseline_source(&model, &stream)?;
    let mut adapted = model.clone();
    let actmad = adapt_stream(&mut adapted, &stream, &reference, &cfg.adapt)?;
    let segments: Vec<String> = schedule
        .segments
        .iter()
        .map(|s| s.condition.label())
        .collect();

    let trace: Vec<Vec<String>> = actmad
        .records
        .iter()
        .zip(&source.records)
        .map(|(a, s)| {
            vec![
                a.batch.to_string(),
                a.segment.to_string(),
                segments[a.segment].clone(),
                a.n_images.to_string(),
                float(s.metric),
                float(a.metric),
                float(a.loss),
                float(Some(a.drift)),
                a.adapted.to_string(),
            ]
        })
        .collect();
    write_csv(
        &paths.out.join(CYCLE_TRACE_CSV),
        &[
            "batch",
            "segment",
            "condition",
            "n_images",
            "source",
            "actmad",
            "loss",
            "drift",
            "adapted",
        ],
        &trace,
    )?;
    let summary: Vec<Vec<String>> = schedule
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            vec![
                i.to_string(),
                segments[i].clone(),
                seg.n_images.to_string(),
                float(source.segment_aggregate(i)),
                float(actmad.segment_aggregate(i)),
            ]
        })
        .collect();
    write_csv(
        &paths.out.join(CYCLE_SUMMARY_CSV),
        &["segment", "condition", "n_images", "source", "actmad"],
        &summary,
    )?;
    let mut jsonl = String::new();
    tag_lines("cycle", &source.to_json_lines()?, &mut jsonl)?;
    tag_lines("cycle", &actmad.to_json_lines()?, &mut jsonl)?;
    write_text(&paths.out.join(CYCLE_JSONL), &jsonl)?;
    timing.record("total", clock.elapsed())?;

    for (i, label) in segments.iter().enumerate() {
        println!(
            "segment {i} {label:<16} source {:.4} actmad {:.4}",
            source.segment_aggregate(i).unwrap_or(f64::NAN),
            actmad.segment_aggregate(i).unwrap_or(f64::NAN)
        );
    }
    Ok(CycleOutcome {
        source,
        actmad,
        segments,
    })
}
