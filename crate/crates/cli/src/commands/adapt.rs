use std::time::Instant;

use actmad_core::adapt::{
    adapt_stream, baseline_entropy, baseline_norm, baseline_source, AdaptReport, AlignmentReference,
};
use actmad_core::data::{build_cycle_stream, Condition, CycleSchedule, SyntheticDataset};
use actmad_core::model::Model;
use actmad_core::tensor::param_norm;
use actmad_core::Error;
use rayon::prelude::*;

use super::{load_artifacts, references, tag_lines, Paths};
use crate::config::Baseline;
use crate::report::{ensure_dir, float, write_csv, write_text, TimingLog};
use crate::ExperimentConfig;

pub const ADAPT_CSV: &str = "adapt_summary.csv";
pub const ADAPT_JSONL: &str = "adapt_report.jsonl";

const HEADER: [&str; 8] = [
    "condition",
    "severity",
    "source",
    "norm",
    "entropy",
    "actmad",
    "mean_alignment_loss",
    "relative_drift",
];

/// Aggregate metrics of one condition, each method starting from the source model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptRow {
    pub condition: Condition,
    pub source: Option<f64>,
    pub norm: Option<f64>,
    pub entropy: Option<f64>,
    pub actmad: f64,
    pub mean_alignment_loss: Option<f64>,
    /// Parameter distance after the pass over the norm of the source parameters.
    pub relative_drift: f64,
}

impl AdaptRow {
    fn cells(&self) -> Vec<String> {
        let (name, severity) = match &self.condition {
            Condition::Clean => ("clean".to_string(), 0),
            Condition::Corrupted(spec) => (spec.kind.to_string(), spec.severity),
        };
        vec![
            name,
            severity.to_string(),
            float(self.source),
            float(self.norm),
            float(self.entropy),
            float(Some(self.actmad)),
            float(self.mean_alignment_loss),
            float(Some(self.relative_drift)),
        ]
    }
}

struct ConditionRun {
    row: AdaptRow,
    jsonl: String,
    seconds: f64,
}

fn run_condition(
    cfg: &ExperimentConfig,
    model: &Model,
    reference: &AlignmentReference,
    test: &SyntheticDataset,
    condition: Condition,
) -> anyhow::Result<ConditionRun> {
    let clock = Instant::now();
    let schedule = CycleSchedule::single(condition, cfg.data.n_test);
    let stream = build_cycle_stream(test, &schedule, cfg.adapt.batch_size, cfg.data.stream_seed)?;
    let mut reports: Vec<AdaptReport> = Vec::new();
    let mut jsonl = String::new();
    let label = condition.label();
    let (mut source, mut norm, mut entropy) = (None, None, None);
    for baseline in &cfg.data.baselines {
        let report = match baseline {
            Baseline::Source => baseline_source(model, &stream)?,
            Baseline::Norm => baseline_norm(model, &stream)?,
            Baseline::Entropy => match baseline_entropy(&mut model.clone(), &stream, &cfg.adapt) {
                Err(Error::Capability(why)) => {
                    let note = serde_json::json!({ "method": "entropy", "unsupported": why });
                    tag_lines(&label, &serde_json::to_string(&note)?, &mut jsonl)?;
                    continue;
                }
                other => other?,
            },
        };
        let slot = match baseline {
            Baseline::Source => &mut source,
            Baseline::Norm => &mut norm,
            Baseline::Entropy => &mut entropy,
        };
        *slot = report.aggregate();
        reports.push(report);
    }
    let mut adapted = model.clone();
    let actmad = adapt_stream(&mut adapted, &stream, reference, &cfg.adapt)?;
    let row = AdaptRow {
        condition,
        source,
        norm,
        entropy,
        actmad: actmad.aggregate().unwrap_or(f64::NAN),
        mean_alignment_loss: actmad.mean_loss(),
        relative_drift: actmad.records.last().map_or(0.0, |r| r.drift) / param_norm(&model.params),
    };
    reports.push(actmad);
    for report in &reports {
        tag_lines(&label, &report.to_json_lines()?, &mut jsonl)?;
    }
    Ok(ConditionRun {
        row,
        jsonl,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Per-condition adaptation from the source model: the clean stream first when
/// `data.clean_pass` is set, then every configured corruption.
pub fn adapt(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<Vec<AdaptRow>> {
    ensure_dir(&paths.out)?;
    let timing = TimingLog::new(&paths.out, "adapt");
    let clock = Instant::now();
    let (model, bundle) = load_artifacts(cfg, paths)?;
    let reference = references(cfg, &model, &bundle, &[&cfg.adapt])?.remove(0);
    let test = cfg.test_set()?;
    let mut conditions = Vec::new();
    if cfg.data.clean_pass {
        conditions.push(Condition::Clean);
    }
    conditions.extend(
        cfg.data
            .corruptions
            .iter()
            .map(|&s| Condition::Corrupted(s)),
    );
    let runs = conditions
        .par_iter()
        .map(|&c| run_condition(cfg, &model, &reference, &test, c))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let rows: Vec<AdaptRow> = runs.iter().map(|r| r.row.clone()).collect();
    write_csv(
        &paths.out.join(ADAPT_CSV),
        &HEADER,
        &rows.iter().map(AdaptRow::cells).collect::<Vec<_>>(),
    )?;
    write_text(
        &paths.out.join(ADAPT_JSONL),
        &runs.iter().map(|r| r.jsonl.as_str()).collect::<String>(),
    )?;
    for run in &runs {
        timing.record(
            &run.row.condition.label(),
            std::time::Duration::from_secs_f64(run.seconds),
        )?;
    }
    timing.record("total", clock.elapsed())?;

    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8}",
        "condition", "source", "norm", "entropy", "actmad"
    );
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        println!(
            "{:<16} {:>8} {:>8} {:>8} {:>8.4}",
            r.condition.label(),
            show(r.source),
            show(r.norm),
            show(r.entropy),
            r.actmad
        );
    }
    Ok(rows)
}
