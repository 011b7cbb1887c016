//! Per-location activation statistics of clean data, and their file format.

mod file;

use serde::Serialize;

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::io::fnv1a64;
use crate::model::{model_to_bytes, Model};
use crate::tensor::{Pooling, Tape, Tensor, Var};

pub use file::{load_stats, save_stats, stats_from_bytes, stats_to_bytes};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer_id: String,
    /// C, H, W.
    pub shape: [usize; 3],
    pub mean: Vec<f64>,
    /// Population variance (divided by the sample count).
    pub var: Vec<f64>,
    pub n_samples: u64,
}

impl LayerStats {
    pub fn validate(&self) -> Result<()> {
        let len: usize = self.shape.iter().product();
        if self.mean.len() != len || self.var.len() != len {
            return Err(Error::shape(
                "LayerStats",
                format!(
                    "layer {} declares {:?} but holds {} means and {} variances",
                    self.layer_id,
                    self.shape,
                    self.mean.len(),
                    self.var.len()
                ),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::Invariant(format!(
                "layer {} was computed from {} samples, at least 2 are required",
                self.layer_id, self.n_samples
            )));
        }
        if let Some(i) = self.var.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Invariant(format!(
                "layer {} has variance {} at element {i}",
                self.layer_id, self.var[i]
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.var.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "layer {} has non-finite statistics",
                self.layer_id
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsBundle {
    /// FNV-1a of the checkpoint bytes the statistics were computed with.
    pub model_fingerprint: u64,
    /// H, W of the model input.
    pub resolution: [usize; 2],
    pub layers: Vec<LayerStats>,
}

impl StatsBundle {
    pub fn validate(&self) -> Result<()> {
        if self.model_fingerprint == 0 {
            return Err(Error::Invariant(
                "statistics carry no model fingerprint".into(),
            ));
        }
        if self.layers.is_empty() {
            return Err(Error::Invariant("statistics hold no layers".into()));
        }
        self.layers.iter().try_for_each(LayerStats::validate)
    }

    /// Checks that the layers line up with `model`'s taps and, when given, that the
    /// fingerprint matches the checkpoint bytes.
    pub fn check_model(&self, model: &Model, fingerprint: Option<u64>) -> Result<()> {
        if let Some(fp) = fingerprint {
            if fp != self.model_fingerprint {
                return Err(Error::Invariant(format!(
                    "statistics were computed for model {:016x}, this checkpoint is {fp:016x}",
                    self.model_fingerprint
                )));
            }
        }
        if self.resolution != model.config().input_resolution {
            return Err(Error::shape(
                "StatsBundle",
                format!(
                    "resolution {:?} vs model {:?}",
                    self.resolution,
                    model.config().input_resolution
                ),
            ));
        }
        let taps = model.tap_points();
        if taps.len() != self.layers.len() {
            return Err(Error::shape(
                "StatsBundle",
                format!("{} layers vs {} model taps", self.layers.len(), taps.len()),
            ));
        }
        for (t, l) in taps.iter().zip(&self.layers) {
            if t.layer_id != l.layer_id || t.expected_shape != l.shape {
                return Err(Error::shape(
                    "StatsBundle",
                    format!(
                        "layer {} {:?} does not match tap {} {:?}",
                        l.layer_id, l.shape, t.layer_id, t.expected_shape
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Mean and population variance over the batch axis of an N x C x H x W
/// activation, one value per location, recorded on the tape.
pub fn batch_mean_var(tape: &mut Tape, activations: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(activations);
    if shape.len() != 4 {
        return Err(Error::shape(
            "batch_mean_var",
            format!("expected NCHW, got {shape:?}"),
        ));
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch statistics need at least 2 samples, got {}",
            shape[0]
        )));
    }
    let mean = tape.moment(activations, 1, Pooling::Batch)?;
    let var = tape.moment(activations, 2, Pooling::Batch)?;
    Ok((mean, var))
}

/// Running (count, mean, M2) per element, merged batch by batch.
struct Accumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    /// Merges the rows of `batch` (n x len) with the pairwise update.
    fn merge(&mut self, batch: &[f64], n: usize) {
        let len = self.mean.len();
        let mut bmean = vec![0.0; len];
        for row in batch.chunks(len) {
            bmean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        bmean.iter_mut().for_each(|m| *m /= n as f64);
        let mut bm2 = vec![0.0; len];
        for row in batch.chunks(len) {
            for ((s, v), m) in bm2.iter_mut().zip(row).zip(&bmean) {
                *s += (v - m) * (v - m);
            }
        }
        let (na, nb) = (self.count as f64, n as f64);
        let total = na + nb;
        for i in 0..len {
            let delta = bmean[i] - self.mean[i];
            self.mean[i] += delta * nb / total;
            self.m2[i] += bm2[i] + delta * delta * na * nb / total;
        }
        self.count += n as u64;
    }
}

/// Streams `data` through `model` in eval mode and returns the exact per-location
/// mean and population variance of every tap.
pub fn compute_training_stats(
    model: &Model,
    data: &SyntheticDataset,
    batch_size: usize,
) -> Result<StatsBundle> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot compute statistics of an empty dataset".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let taps = model.tap_points();
    let mut acc: Vec<Accumulator> = taps
        .iter()
        .map(|t| Accumulator::new(t.expected_shape.iter().product()))
        .collect();
    for start in (0..data.len()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let (images, _) = data.batch(&idx);
        let (_, acts) = model.forward_with_taps(&images)?;
        for ((a, act), tap) in acc.iter_mut().zip(&acts).zip(taps) {
            if act.shape()[1..] != tap.expected_shape {
                return Err(Error::shape(
                    "compute_training_stats",
                    format!(
                        "tap {} produced {:?}, expected {:?}",
                        tap.layer_id,
                        act.shape(),
                        tap.expected_shape
                    ),
                ));
            }
            a.merge(act.data(), idx.len());
        }
    }
    let layers = taps
        .iter()
        .zip(acc)
        .map(|(t, a)| {
            let n = a.count as f64;
            LayerStats {
                layer_id: t.layer_id.clone(),
                shape: t.expected_shape,
                mean: a.mean,
                var: a.m2.iter().map(|m| (m / n).max(0.0)).collect(),
                n_samples: a.count,
            }
        })
        .collect();
    Ok(StatsBundle {
        model_fingerprint: fnv1a64(&model_to_bytes(model)?),
        resolution: model.config().input_resolution,
        layers,
    })
}

/// Per-channel mean and variance of the pooled population behind per-location
/// statistics: the variance includes the spread of the location means.
pub fn channel_average(stats: &LayerStats) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = stats.shape;
    let hw = h * w;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let m = &stats.mean[ch * hw..(ch + 1) * hw];
        let v = &stats.var[ch * hw..(ch + 1) * hw];
        let mc = m.iter().sum::<f64>() / hw as f64;
        let vc = m
            .iter()
            .zip(v)
            .map(|(mi, vi)| vi + (mi - mc) * (mi - mc))
            .sum::<f64>()
            / hw as f64;
        mean.push(mc);
        var.push(vc);
    }
    (mean, var)
}

/// Per-channel mean and pooled variance of a raw N x C x H x W activation.
pub fn channel_mean_var(activations: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = activations.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "channel_mean_var",
            format!("expected NCHW, got {s:?}"),
        ));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, plane) in activations.data().chunks(hw).enumerate() {
        mean[i % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, plane) in activations.data().chunks(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// Clean-data central moments of orders 3 and up for every tap.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMoments {
    pub max_order: u32,
    /// `per_location[layer][k - 3]` holds E[(a - mean)^k] per location.
    pub per_location: Vec<Vec<Vec<f64>>>,
    /// The same over the pooled N x H x W population of each channel.
    pub per_channel: Vec<Vec<Vec<f64>>>,
}

impl ReferenceMoments {
    pub fn order(&self, layer: usize, order: u32, channel_averaged: bool) -> Option<&[f64]> {
        if order < 3 || order > self.max_order {
            return None;
        }
        let table = if channel_averaged {
            &self.per_channel
        } else {
            &self.per_location
        };
        table.get(layer).map(|l| l[(order - 3) as usize].as_slice())
    }
}

/// Second pass over `data` accumulating central moments about the means in
/// `bundle`. Orders 1 and 2 are the bundle's own mean and variance.
pub fn compute_reference_moments(
    model: &Model,
    data: &SyntheticDataset,
    bundle: &StatsBundle,
    batch_size: usize,
    max_order: u32,
) -> Result<ReferenceMoments> {
    if !(2..=8).contains(&max_order) {
        return Err(Error::InvalidArgument(format!(
            "moment order must be in 2..=8, got {max_order}"
        )));
    }
    bundle.check_model(model, None)?;
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "need a nonempty dataset and positive batch size".into(),
        ));
    }
    let extra = (max_order.saturating_sub(2)) as usize;
    let channel_means: Vec<Vec<f64>> = bundle.layers.iter().map(|l| channel_average(l).0).collect();
    let mut loc: Vec<Vec<Vec<f64>>> = bundle
        .layers
        .iter()
        .map(|l| vec![vec![0.0; l.mean.len()]; extra])
        .collect();
    let mut chan: Vec<Vec<Vec<f64>>> = bundle
        .layers
        .iter()
        .map(|l| vec![vec![0.0; l.channels()]; extra])
        .collect();
    for start in (0..data.len()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let (images, _) = data.batch(&idx);
        let (_, acts) = model.forward_with_taps(&images)?;
        for (li, (act, layer)) in acts.iter().zip(&bundle.layers).enumerate() {
            let len = layer.mean.len();
            let hw = layer.shape[1] * layer.shape[2];
            for row in act.data().chunks(len) {
                for (e, (&v, &m)) in row.iter().zip(&layer.mean).enumerate() {
                    let d = v - m;
                    let dc = v - channel_means[li][e / hw];
                    let (mut p, mut pc) = (d * d, dc * dc);
                    for k in 0..extra {
                        p *= d;
                        pc *= dc;
                        loc[li][k][e] += p;
                        chan[li][k][e / hw] += pc;
                    }
                }
            }
        }
    }
    let n = data.len() as f64;
    for (li, layer) in bundle.layers.iter().enumerate() {
        let pooled = n * (layer.shape[1] * layer.shape[2]) as f64;
        loc[li].iter_mut().flatten().for_each(|v| *v /= n);
        chan[li].iter_mut().flatten().for_each(|v| *v /= pooled);
    }
    Ok(ReferenceMoments {
        max_order,
        per_location: loc,
        per_channel: chan,
    })
}
