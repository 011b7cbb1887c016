//! Online alignment of test-batch activation statistics, its ablation variants,
//! and the comparison baselines.

mod baselines;

use serde::{Deserialize, Serialize};

use crate::data::{StreamBatch, Targets, TaskKind};
use crate::error::{Error, Result};
use crate::model::{batch_accuracy, batch_mse, GradScope, Head, Model};
use crate::stats::{channel_average, ReferenceMoments, StatsBundle};
use crate::tensor::{
    affine_mask, param_distance, sgd_step, NormMode, Parameter, Pooling, Tape, Tensor, Var,
};

pub use baselines::{baseline_entropy, baseline_norm, baseline_source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// `lr * batch_size / reference_batch_size`.
    LinearWithBatch,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    MultiLayer,
    LastLayerOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMode {
    PerLocation,
    ChannelAveraged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MeanVarL1,
    CentralMomentDifference { max_order: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    Full,
    AffineOnly,
}

fn default_lr() -> f64 {
    6e-7
}
fn default_batch() -> usize {
    128
}
fn default_scaling() -> LrScaling {
    LrScaling::LinearWithBatch
}
fn default_reference_batch() -> usize {
    128
}
fn default_layer_mode() -> LayerMode {
    LayerMode::MultiLayer
}
fn default_stat_mode() -> StatMode {
    StatMode::PerLocation
}
fn default_loss_mode() -> LossMode {
    LossMode::MeanVarL1
}
fn default_param_mode() -> ParamMode {
    ParamMode::Full
}
fn default_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Learning rate at the reference batch size.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_scaling")]
    pub lr_scaling: LrScaling,
    #[serde(default = "default_reference_batch")]
    pub reference_batch_size: usize,
    #[serde(default = "default_layer_mode")]
    pub layer_mode: LayerMode,
    #[serde(default = "default_stat_mode")]
    pub stat_mode: StatMode,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
    #[serde(default = "default_param_mode")]
    pub param_mode: ParamMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps_per_batch: usize,
    /// Per-tap loss weights; an unweighted sum when absent.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
    /// Learning rate of the entropy baseline at the reference batch size; `lr` when absent.
    #[serde(default)]
    pub entropy_lr: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("adapt lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 || self.reference_batch_size == 0 || self.steps_per_batch == 0 {
            return bad(
                "adapt needs batch_size >= 2, reference_batch_size >= 1, steps_per_batch >= 1"
                    .into(),
            );
        }
        if let LossMode::CentralMomentDifference { max_order } = self.loss_mode {
            if !(2..=8).contains(&max_order) {
                return bad(format!(
                    "central moment order must be in 2..=8, got {max_order}"
                ));
            }
        }
        if let Some(w) = &self.layer_weights {
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return bad("layer weights must be finite and nonnegative".into());
            }
        }
        if let Some(lr) = self.entropy_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("entropy_lr must be positive, got {lr}"));
            }
        }
        Ok(())
    }

    fn scale(&self, base: f64) -> f64 {
        match self.lr_scaling {
            LrScaling::LinearWithBatch => {
                base * self.batch_size as f64 / self.reference_batch_size as f64
            }
            LrScaling::Fixed => base,
        }
    }

    /// Learning rate applied to each adaptation step.
    pub fn effective_lr(&self) -> f64 {
        self.scale(self.lr)
    }

    pub fn effective_entropy_lr(&self) -> f64 {
        self.scale(self.entropy_lr.unwrap_or(self.lr))
    }

    pub fn max_order(&self) -> u32 {
        match self.loss_mode {
            LossMode::MeanVarL1 => 2,
            LossMode::CentralMomentDifference { max_order } => max_order,
        }
    }

    fn grad_scope(&self) -> GradScope {
        match self.param_mode {
            ParamMode::Full => GradScope::All,
            ParamMode::AffineOnly => GradScope::Kinds(affine_mask()),
        }
    }
}

/// L1 distance between batch and training statistics of one layer: the sum over
/// elements of |batch mean - train mean| plus |batch var - train var|.
pub fn layer_alignment_loss(
    tape: &mut Tape,
    batch_mean: Var,
    batch_var: Var,
    train_mean: &Tensor,
    train_var: &Tensor,
) -> Result<Var> {
    let reference = [train_mean.clone(), train_var.clone()];
    moment_terms(tape, &[batch_mean, batch_var], &reference, "layer")
}

/// Sum of `|batch_k - reference_k|` over orders, each batch moment compared with
/// its constant reference.
fn moment_terms(tape: &mut Tape, batch: &[Var], reference: &[Tensor], layer: &str) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for (k, (b, r)) in batch.iter().zip(reference).enumerate() {
        if tape.shape(*b) != r.shape() {
            return Err(Error::shape(
                "alignment loss",
                format!(
                    "layer {layer} order {}: batch statistics {:?} vs stored {:?}",
                    k + 1,
                    tape.shape(*b),
                    r.shape()
                ),
            ));
        }
        let target = tape.constant(r.clone());
        terms.push(tape.l1_distance(*b, target)?);
    }
    tape.add_all(&terms)
}

/// Clean-data targets for every tap, laid out for one loss configuration.
#[derive(Clone, Debug)]
pub struct AlignmentReference {
    ids: Vec<String>,
    /// `moments[layer][k - 1]` for orders 1..=max_order.
    moments: Vec<Vec<Tensor>>,
    pooling: Pooling,
}

impl AlignmentReference {
    /// Builds targets from the training statistics. Orders above 2 are taken from
    /// `higher`, which must cover the configured order.
    pub fn new(
        bundle: &StatsBundle,
        higher: Option<&ReferenceMoments>,
        cfg: &AdaptConfig,
    ) -> Result<Self> {
        bundle.validate()?;
        let max_order = cfg.max_order();
        let averaged = cfg.stat_mode == StatMode::ChannelAveraged;
        let mut moments = Vec::with_capacity(bundle.layers.len());
        for (li, layer) in bundle.layers.iter().enumerate() {
            let (mean, var, shape) = if averaged {
                let (m, v) = channel_average(layer);
                (m, v, vec![layer.shape[0]])
            } else {
                (layer.mean.clone(), layer.var.clone(), layer.shape.to_vec())
            };
            let mut orders = vec![
                Tensor::new(shape.clone(), mean)?,
                Tensor::new(shape.clone(), var)?,
            ];
            for k in 3..=max_order {
                let data = higher
                    .and_then(|h| h.order(li, k, averaged))
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "no reference moment of order {k} for layer {}",
                            layer.layer_id
                        ))
                    })?;
                orders.push(Tensor::new(shape.clone(), data.to_vec())?);
            }
            moments.push(orders);
        }
        Ok(Self {
            ids: bundle.layers.iter().map(|l| l.layer_id.clone()).collect(),
            moments,
            pooling: if averaged {
                Pooling::BatchSpatial
            } else {
                Pooling::Batch
            },
        })
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.ids
    }
}

/// Per-layer moment-matching losses and their sum over the selected layers.
/// With `max_order` 2 this is the mean/variance L1 loss; larger orders add the
/// central-moment terms.
fn alignment_loss(
    tape: &mut Tape,
    taps: &[Var],
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
) -> Result<(Var, Vec<(usize, Var)>)> {
    if taps.len() != reference.moments.len() {
        return Err(Error::shape(
            "alignment loss",
            format!(
                "{} taps vs {} stored layers",
                taps.len(),
                reference.moments.len()
            ),
        ));
    }
    if let Some(w) = &cfg.layer_weights {
        if w.len() != taps.len() {
            return Err(Error::shape(
                "alignment loss",
                format!("{} layer weights for {} taps", w.len(), taps.len()),
            ));
        }
    }
    let selected: Vec<usize> = match cfg.layer_mode {
        LayerMode::MultiLayer => (0..taps.len()).collect(),
        LayerMode::LastLayerOnly => vec![taps.len() - 1],
    };
    let max_order = cfg.max_order();
    let mut per_layer = Vec::with_capacity(selected.len());
    for &li in &selected {
        let id = &reference.ids[li];
        let n = tape.shape(taps[li])[0];
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer {id}: batch statistics need at least 2 samples"
            )));
        }
        let name_layer = |e: Error| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{op} in layer {id}")),
            other => other,
        };
        let batch = (1..=max_order)
            .map(|k| tape.moment(taps[li], k, reference.pooling))
            .collect::<Result<Vec<_>>>()
            .map_err(name_layer)?;
        let mut loss =
            moment_terms(tape, &batch, &reference.moments[li], id).map_err(name_layer)?;
        if let Some(w) = &cfg.layer_weights {
            loss = tape.scale(loss, w[li]).map_err(name_layer)?;
        }
        per_layer.push((li, loss));
    }
    let vars: Vec<Var> = per_layer.iter().map(|p| p.1).collect();
    let total = tape.add_all(&vars)?;
    Ok((total, per_layer))
}

/// Unweighted sum over the selected taps of the mean/variance L1 loss. Returns the
/// total and each selected layer's term.
pub fn total_alignment_loss(
    tape: &mut Tape,
    taps: &[Var],
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
) -> Result<(Var, Vec<Var>)> {
    let cfg = AdaptConfig {
        loss_mode: LossMode::MeanVarL1,
        ..cfg.clone()
    };
    let (total, layers) = alignment_loss(tape, taps, reference, &cfg)?;
    Ok((total, layers.into_iter().map(|l| l.1).collect()))
}

/// Central moment difference over orders 1..=`max_order` and all selected taps.
pub fn cmd_loss(
    tape: &mut Tape,
    taps: &[Var],
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
    max_order: u32,
) -> Result<Var> {
    if max_order < 2 {
        return Err(Error::InvalidArgument(format!(
            "central moment order must be >= 2, got {max_order}"
        )));
    }
    let have = reference.moments.first().map_or(0, Vec::len) as u32;
    if max_order > have {
        return Err(Error::InvalidArgument(format!(
            "reference holds moments up to order {have}, order {max_order} requested"
        )));
    }
    let cfg = AdaptConfig {
        loss_mode: LossMode::CentralMomentDifference { max_order },
        ..cfg.clone()
    };
    Ok(alignment_loss(tape, taps, reference, &cfg)?.0)
}

/// Task metric of a batch: accuracy for class labels, mean squared error for boxes.
pub fn batch_metric(output: &Tensor, targets: &Targets) -> Result<f64> {
    match targets {
        Targets::Classes(labels) => Ok(batch_accuracy(output, labels)),
        Targets::Boxes(boxes) => batch_mse(output, boxes),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub loss: f64,
    /// (layer id, loss) for each layer that contributed.
    pub layer_losses: Vec<(String, f64)>,
    /// Task metric on the batch before the update, when targets are known.
    pub metric: Option<f64>,
}

/// One adaptation step on `images`: eval-mode forward with taps, alignment loss,
/// backward, and a plain gradient step on the parameters selected by
/// `cfg.param_mode`. Targets only feed the returned metric.
pub fn adapt_step(
    model: &mut Model,
    images: &Tensor,
    targets: Option<&Targets>,
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
) -> Result<StepRecord> {
    cfg.validate()?;
    let lr = cfg.effective_lr();
    let scope = cfg.grad_scope();
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = model.forward(&mut tape, x, NormMode::Eval, &scope)?;
    let metric = targets
        .map(|t| batch_metric(tape.value(pass.output), t))
        .transpose()?;
    let (loss, per_layer) = alignment_loss(&mut tape, &pass.taps, reference, cfg)?;
    let layer_losses: Vec<(String, f64)> = per_layer
        .iter()
        .map(|&(li, v)| (reference.ids[li].clone(), tape.value(v).data()[0]))
        .collect();
    let value = tape.value(loss).item()?;
    tape.backward(loss)?.accumulate_into(&mut model.params)?;
    let mask = match cfg.param_mode {
        ParamMode::Full => None,
        ParamMode::AffineOnly => Some(affine_mask()),
    };
    sgd_step(&mut model.params, lr, mask.as_ref())?;
    if let Some(p) = model.params.iter().find(|p| !p.tensor.all_finite()) {
        return Err(Error::NonFinite(format!("update of {}", p.name)));
    }
    Ok(StepRecord {
        loss: value,
        layer_losses,
        metric,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub segment: usize,
    pub n_images: usize,
    /// Alignment (or entropy) loss; absent when the method does not compute one.
    pub loss: Option<f64>,
    pub layer_losses: Vec<(String, f64)>,
    /// Metric on this batch before it was used for adaptation.
    pub metric: Option<f64>,
    /// L2 distance of the parameters from their starting values after this batch.
    pub drift: f64,
    pub adapted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptReport {
    pub method: String,
    /// "accuracy" or "mse".
    pub metric_name: String,
    pub records: Vec<BatchRecord>,
}

impl AdaptReport {
    fn new(method: &str, head: Head) -> Self {
        Self {
            method: method.to_string(),
            metric_name: match head {
                Head::Classify => "accuracy",
                Head::Regress => "mse",
            }
            .to_string(),
            records: Vec::new(),
        }
    }

    /// Sample-weighted metric over every labelled batch.
    pub fn aggregate(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in &self.records {
            if let Some(m) = r.metric {
                sum += m * r.n_images as f64;
                n += r.n_images;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Sample-weighted metric of the batches tagged with `segment`.
    pub fn segment_aggregate(&self, segment: usize) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in self.records.iter().filter(|r| r.segment == segment) {
            if let Some(m) = r.metric {
                sum += m * r.n_images as f64;
                n += r.n_images;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.records.iter().filter_map(|r| r.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// One JSON object per batch, then a summary line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "method": self.method,
                "metric": self.metric_name,
                "batches": self.records.len(),
                "aggregate": self.aggregate(),
                "mean_loss": self.mean_loss(),
                "final_drift": self.records.last().map(|r| r.drift),
            }
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }
}

fn check_stream(stream: &[StreamBatch], model: &Model) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty stream".into()));
    }
    let want = match model.head() {
        Head::Classify => TaskKind::Classification,
        Head::Regress => TaskKind::Localization,
    };
    if let Some(t) = stream
        .iter()
        .filter_map(|b| b.targets.as_ref())
        .find(|t| t.task() != want)
    {
        return Err(Error::InvalidArgument(format!(
            "{} targets given to a {want} model",
            t.task()
        )));
    }
    Ok(())
}

/// Single online pass: each batch is measured, then used for one update (batches
/// with fewer than two images are measured only). The model keeps its adapted
/// parameters.
pub fn adapt_stream(
    model: &mut Model,
    stream: &[StreamBatch],
    reference: &AlignmentReference,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    check_stream(stream, model)?;
    let start: Vec<Parameter> = model.params.clone();
    let mut report = AdaptReport::new("actmad", model.head());
    for (i, batch) in stream.iter().enumerate() {
        let record = if batch.len() >= 2 {
            let first = adapt_step(model, &batch.images, batch.targets.as_ref(), reference, cfg)?;
            for _ in 1..cfg.steps_per_batch {
                adapt_step(model, &batch.images, None, reference, cfg)?;
            }
            BatchRecord {
                batch: i,
                segment: batch.segment,
                n_images: batch.len(),
                loss: Some(first.loss),
                layer_losses: first.layer_losses,
                metric: first.metric,
                drift: param_distance(&start, &model.params),
                adapted: true,
            }
        } else {
            let out = model.infer(&batch.images)?;
            BatchRecord {
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
                drift: param_distance(&start, &model.params),
                adapted: false,
            }
        };
        report.records.push(record);
    }
    Ok(report)
}
