//! Supervised source training: SGD with heavy-ball momentum and a cosine schedule.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, SyntheticDataset, Targets};
use crate::error::{Error, Result};
use crate::model::{GradScope, Head, Model};
use crate::tensor::{NormMode, ParamKind, Tape, Tensor};

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 penalty on conv and dense weights.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "train needs epochs >= 1 and batch_size >= 2".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "train lr must be positive, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Task loss of `model` on one batch, recorded on `tape`.
fn task_loss(
    model: &mut Model,
    tape: &mut Tape,
    images: Tensor,
    targets: &Targets,
) -> Result<crate::tensor::Var> {
    let x = tape.constant(images);
    let pass = model.forward(tape, x, NormMode::Train, &GradScope::All)?;
    match (model.head(), targets) {
        (Head::Classify, Targets::Classes(labels)) => {
            tape.softmax_cross_entropy(pass.output, labels)
        }
        (Head::Regress, Targets::Boxes(boxes)) => {
            let flat: Vec<f64> = boxes.iter().flatten().copied().collect();
            let t = tape.constant(Tensor::new(vec![boxes.len(), 4], flat)?);
            tape.mse(pass.output, t)
        }
        (head, t) => Err(Error::InvalidArgument(format!(
            "{head:?} head cannot train on {} targets",
            t.task()
        ))),
    }
}

/// Trains in place. Deterministic given the model, dataset and `cfg.seed`.
pub fn train_model(
    model: &mut Model,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::InvalidArgument(
            "training set needs at least two samples".into(),
        ));
    }
    let per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut velocity: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|p| vec![0.0; p.tensor.len()])
        .collect();
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            epoch as u64,
        )));
        let (mut sum, mut seen) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let lr = 0.5 * cfg.lr * (1.0 + (PI * step as f64 / total as f64).cos());
            let (images, targets) = ds.batch(chunk);
            let mut tape = Tape::new();
            let loss = task_loss(model, &mut tape, images, &targets)?;
            let value = tape.value(loss).item()?;
            tape.backward(loss)?.accumulate_into(&mut model.params)?;
            for (p, v) in model.params.iter_mut().zip(velocity.iter_mut()) {
                let decay = match p.kind {
                    ParamKind::ConvWeight | ParamKind::DenseWeight => cfg.weight_decay,
                    _ => 0.0,
                };
                let grad = p
                    .tensor
                    .take_grad()
                    .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
                for ((w, vi), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                    *vi = cfg.momentum * *vi + g + decay * *w;
                    *w -= lr * *vi;
                }
                if p.tensor.data().iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFinite(format!("training update of {}", p.name)));
                }
            }
            sum += value * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let mean = sum / seen as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
        }
        epoch_loss.push(mean);
    }
    Ok(TrainReport {
        epoch_loss,
        steps: step,
    })
}
