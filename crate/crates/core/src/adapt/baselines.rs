//! Comparison methods run on the same streams as the alignment loop.

use super::{batch_metric, check_stream, AdaptConfig, AdaptReport, BatchRecord};
use crate::data::StreamBatch;
use crate::error::{Error, Result};
use crate::model::{GradScope, Head, Model};
use crate::tensor::{affine_mask, param_distance, sgd_step, NormMode, Tape};

/// The unadapted model.
pub fn baseline_source(model: &Model, stream: &[StreamBatch]) -> Result<AdaptReport> {
    check_stream(stream, model)?;
    let mut report = AdaptReport::new("source", model.head());
    for (i, batch) in stream.iter().enumerate() {
        let out = model.infer(&batch.images)?;
        report.records.push(BatchRecord {
            batch: i,
            segment: batch.segment,
            n_images: batch.len(),
            loss: None,
            layer_losses: Vec::new(),
            metric: batch
                .targets
                .as_ref()
                .map(|t| batch_metric(&out, t))
                .transpose()?,
            drift: 0.0,
            adapted: false,
        });
    }
    Ok(report)
}

/// Normalizes every batch with its own statistics instead of the running ones.
/// Nothing is learned and nothing carries over between batches.
pub fn baseline_norm(model: &Model, stream: &[StreamBatch]) -> Result<AdaptReport> {
    check_stream(stream, model)?;
    let mut report = AdaptReport::new("norm", model.head());
    for (i, batch) in stream.iter().enumerate() {
        let out = model.infer_with(&batch.images, NormMode::TestBatch)?;
        report.records.push(BatchRecord {
            batch: i,
            segment: batch.segment,
            n_images: batch.len(),
            loss: None,
            layer_losses: Vec::new(),
            metric: batch
                .targets
                .as_ref()
                .map(|t| batch_metric(&out, t))
                .transpose()?,
            drift: 0.0,
            adapted: false,
        });
    }
    Ok(report)
}

/// Entropy minimization: batch-statistics normalization and one gradient step per
/// batch on the mean prediction entropy, restricted to normalization scale and
/// shift. Only defined for classifiers.
pub fn baseline_entropy(
    model: &mut Model,
    stream: &[StreamBatch],
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    if model.head() != Head::Classify {
        return Err(Error::Capability(
            "entropy minimization needs class probabilities; a regression head has none".into(),
        ));
    }
    cfg.validate()?;
    check_stream(stream, model)?;
    let lr = cfg.effective_entropy_lr();
    let mask = affine_mask();
    let scope = GradScope::Kinds(mask.clone());
    let start = model.params.clone();
    let mut report = AdaptReport::new("entropy", model.head());
    for (i, batch) in stream.iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let pass = model.forward(&mut tape, x, NormMode::TestBatch, &scope)?;
        let metric = batch
            .targets
            .as_ref()
            .map(|t| batch_metric(tape.value(pass.output), t))
            .transpose()?;
        let loss = tape.softmax_entropy(pass.output)?;
        let value = tape.value(loss).item()?;
        let adapted = batch.len() >= 2;
        if adapted {
            tape.backward(loss)?.accumulate_into(&mut model.params)?;
            sgd_step(&mut model.params, lr, Some(&mask))?;
        }
        report.records.push(BatchRecord {
            batch: i,
            segment: batch.segment,
            n_images: batch.len(),
            loss: Some(value),
            layer_losses: Vec::new(),
            metric,
            drift: param_distance(&start, &model.params),
            adapted,
        });
    }
    Ok(report)
}
