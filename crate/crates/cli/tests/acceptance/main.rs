//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

mod gradients;
mod oracles;
mod pipeline;
mod serialization;

use std::path::Path;
use std::process::ExitCode;

use actmad_cli::ExperimentConfig;
use actmad_core::adapt::baseline_entropy;
use actmad_core::data::{build_cycle_stream, Condition, CycleSchedule};
use actmad_core::model::load_checkpoint;
use actmad_core::Error;

use pipeline::{config, Run};

pub struct Verdict {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Entropy minimization must refuse the trained regression model.
fn entropy_refusal(run: &Run) -> Result<String, String> {
    let cfg =
        ExperimentConfig::load(&config("localize_shift.json"), &[]).map_err(|e| e.to_string())?;
    let mut model = load_checkpoint(run.localize.join("model.ckpt")).map_err(|e| e.to_string())?;
    let test = cfg.test_set().map_err(|e| e.to_string())?;
    let schedule = CycleSchedule::single(Condition::Clean, cfg.adapt.batch_size);
    let stream =
        build_cycle_stream(&test, &schedule, cfg.adapt.batch_size, 0).map_err(|e| e.to_string())?;
    match baseline_entropy(&mut model, &stream, &cfg.adapt) {
        Err(Error::Capability(_)) => Ok("entropy refused with a capability error".into()),
        Err(e) => Err(format!("entropy failed with the wrong error: {e}")),
        Ok(_) => Err("entropy ran on a regression head".into()),
    }
}

fn report(v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!("{status} C{} {}: {}", v.id, v.title, v.detail);
}

fn main() -> ExitCode {
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut verdicts = Vec::new();
    for criterion in [gradients::criterion, oracles::criterion] {
        let v = criterion();
        report(&v);
        verdicts.push(v);
    }

    let first = Run::execute(&work.join("run_a"));
    let pipeline_verdicts = match &first {
        Ok(run) => vec![
            pipeline::zero_shift(run),
            pipeline::shift_recovery(run),
            pipeline::regression(run, entropy_refusal(run)),
            pipeline::ablation_order(run),
            pipeline::small_batches(run),
            pipeline::cycle_recovery(run),
            serialization::criterion(Ok(run)),
        ],
        Err(e) => [
            (3, "zero-shift no-op"),
            (4, "classification shift recovery"),
            (5, "task-agnostic regression"),
            (6, "ablation ordering"),
            (7, "batch-size robustness"),
            (8, "cycle recovery"),
            (9, "serialization"),
        ]
        .into_iter()
        .map(|(id, title)| Verdict {
            id,
            title,
            pass: false,
            detail: format!("pipeline failed: {e}"),
        })
        .collect(),
    };
    for v in pipeline_verdicts {
        report(&v);
        verdicts.push(v);
    }

    let tenth = match &first {
        Ok(run) => pipeline::determinism(run, Run::execute(&work.join("run_b"))),
        Err(e) => Verdict {
            id: 10,
            title: "determinism",
            pass: false,
            detail: format!("first pipeline failed: {e}"),
        },
    };
    report(&tenth);
    verdicts.push(tenth);

    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "{} of {} criteria passed",
        verdicts.len() - failed,
        verdicts.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
