//! Subcommand implementations. Each returns its in-memory results as well as
//! writing them under the output directory.

mod ablate;
mod adapt;
mod cycle;
mod train;

use std::fs;
use std::path::PathBuf;

use actmad_core::adapt::{AdaptConfig, AlignmentReference};
use actmad_core::io::fnv1a64;
use actmad_core::model::{model_from_bytes, Model};
use actmad_core::stats::{compute_reference_moments, load_stats, StatsBundle};
use anyhow::Context;

use crate::{CliError, ExperimentConfig, RunArgs};

pub use ablate::{ablate, AblationRow, ABLATION_CSV, ABLATION_DETAIL_CSV};
pub use adapt::{adapt, AdaptRow, ADAPT_CSV, ADAPT_JSONL};
pub use cycle::{cycle, CycleOutcome, CYCLE_JSONL, CYCLE_SUMMARY_CSV, CYCLE_TRACE_CSV};
pub use train::{stats, train, TrainOutcome, TRAIN_REPORT};

pub const THREADS_ENV: &str = "ACTMAD_THREADS";

#[derive(Clone, Debug)]
pub struct Paths {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub stats: PathBuf,
}

impl Paths {
    pub fn resolve(cfg: &ExperimentConfig, args: &RunArgs) -> Self {
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| cfg.output.directory.clone());
        Self {
            checkpoint: args
                .checkpoint
                .clone()
                .unwrap_or_else(|| out.join("model.ckpt")),
            stats: args.stats.clone().unwrap_or_else(|| out.join("stats.bin")),
            out,
        }
    }
}

/// Pool for independent runs, capped by `ACTMAD_THREADS` when set.
pub fn thread_pool() -> anyhow::Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        })?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?)
}

/// The checkpoint named by `paths` and the fingerprint of its bytes. The
/// checkpoint must have been trained with the config's model section.
pub(crate) fn load_model(cfg: &ExperimentConfig, paths: &Paths) -> anyhow::Result<(Model, u64)> {
    let bytes = fs::read(&paths.checkpoint)
        .with_context(|| format!("reading checkpoint {}", paths.checkpoint.display()))?;
    let model = model_from_bytes(&bytes)
        .with_context(|| format!("loading checkpoint {}", paths.checkpoint.display()))?;
    if model.config() != &cfg.model {
        return Err(CliError::Config {
            path: "model".into(),
            message: format!(
                "{} was built from a different model section",
                paths.checkpoint.display()
            ),
        }
        .into());
    }
    Ok((model, fnv1a64(&bytes)))
}

/// Source model and its training statistics, checked against each other.
pub(crate) fn load_artifacts(
    cfg: &ExperimentConfig,
    paths: &Paths,
) -> anyhow::Result<(Model, StatsBundle)> {
    let (model, fingerprint) = load_model(cfg, paths)?;
    let bundle = load_stats(&paths.stats)
        .with_context(|| format!("loading statistics {}", paths.stats.display()))?;
    bundle
        .check_model(&model, Some(fingerprint))
        .with_context(|| {
            format!(
                "{} does not belong to {}",
                paths.stats.display(),
                paths.checkpoint.display()
            )
        })?;
    Ok((model, bundle))
}

/// Alignment targets for each config; higher moments are gathered from the
/// training set only when some config needs them.
pub(crate) fn references(
    cfg: &ExperimentConfig,
    model: &Model,
    bundle: &StatsBundle,
    variants: &[&AdaptConfig],
) -> anyhow::Result<Vec<AlignmentReference>> {
    let order = variants.iter().map(|v| v.max_order()).max().unwrap_or(2);
    let higher = if order > 2 {
        let train = cfg.train_set()?;
        Some(compute_reference_moments(
            model,
            &train,
            bundle,
            cfg.stats.batch_size,
            order,
        )?)
    } else {
        None
    };
    Ok(variants
        .iter()
        .map(|v| AlignmentReference::new(bundle, higher.as_ref(), v))
        .collect::<actmad_core::Result<_>>()?)
}

/// Prefixes every JSON object line of `lines` with a `condition` field.
pub(crate) fn tag_lines(condition: &str, lines: &str, out: &mut String) -> anyhow::Result<()> {
    let tag = serde_json::to_string(condition)?;
    for line in lines.lines() {
        let body = line
            .strip_prefix('{')
            .context("report line is not a JSON object")?;
        out.push_str("{\"condition\":");
        out.push_str(&tag);
        out.push(',');
        out.push_str(body);
        out.push('\n');
    }
    Ok(())
}
