//! Small conv -> batch norm -> ReLU backbones with activation taps.

mod checkpoint;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticDataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::{NormMode, ParamKind, Parameter, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, model_from_bytes, model_to_bytes, save_checkpoint};

/// Rows per chunk when evaluating whole datasets.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Global average pooling and a dense layer producing logits.
    Classify,
    /// Flatten, dense, sigmoid: normalized box coordinates.
    Regress,
}

fn default_resolution() -> [usize; 2] {
    [32, 32]
}
fn default_in_channels() -> usize {
    1
}
fn default_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_blocks() -> usize {
    2
}
fn default_head() -> Head {
    Head::Classify
}
fn default_classes() -> usize {
    4
}
fn default_outputs() -> usize {
    4
}
fn default_input_mean() -> f64 {
    0.5
}
fn default_input_std() -> f64 {
    0.25
}
fn default_momentum() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_resolution")]
    pub input_resolution: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Fixed input standardization `(x - input_mean) / input_std`.
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
    /// Width of each stage; every stage after the first halves the resolution.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_head")]
    pub head: Head,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_outputs")]
    pub n_outputs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Subset of tap ids to expose; all post-norm sites when absent.
    #[serde(default)]
    pub taps: Option<Vec<String>>,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_epsilon")]
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ModelConfig {
    pub fn downsampling(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!(
                "channels must be nonempty and positive, got {:?}",
                self.channels
            ));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 {
            return bad("blocks_per_stage and in_channels must be >= 1".into());
        }
        let [h, w] = self.input_resolution;
        let f = self.downsampling();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!(
                "input resolution {h}x{w} is not divisible by the downsampling factor {f}"
            ));
        }
        match self.head {
            Head::Classify if self.n_classes < 2 => return bad("n_classes must be >= 2".into()),
            Head::Regress if self.n_outputs == 0 => return bad("n_outputs must be >= 1".into()),
            _ => {}
        }
        if !(self.input_std > 0.0) || !self.input_mean.is_finite() {
            return bad("input_std must be positive and input_mean finite".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_epsilon > 0.0) {
            return bad("bn_momentum must be in (0, 1] and bn_epsilon positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPosition {
    PostNormPreActivation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub layer_id: String,
    pub position: TapPosition,
    /// C, H, W at the configured input resolution.
    pub expected_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    id: String,
    stride: usize,
    /// Indices into `Model::params`: conv weight, conv bias, norm scale, norm shift.
    params: [usize; 4],
    out_shape: [usize; 3],
}

/// Running normalization statistics of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub params: Vec<Parameter>,
    pub running: Vec<RunningStats>,
    blocks: Vec<Block>,
    /// Dense weight and bias indices.
    head: [usize; 2],
    taps: Vec<TapPoint>,
    /// Block index of each declared tap.
    tap_blocks: Vec<usize>,
}

/// Which parameters are recorded as differentiable on a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    Kinds(BTreeSet<ParamKind>),
    None,
}

impl GradScope {
    fn includes(&self, kind: ParamKind) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Kinds(k) => k.contains(&kind),
            GradScope::None => false,
        }
    }
}

/// Handles produced by one recorded forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// One activation per declared tap, in declaration order.
    pub taps: Vec<Var>,
}

/// Model outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Labels(Vec<usize>),
    Boxes(Vec<Vec<f64>>),
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut he = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
    };
    let [mut h, mut w] = cfg.input_resolution;
    let mut params = Vec::new();
    let mut blocks = Vec::new();
    let mut running = Vec::new();
    let mut cin = cfg.in_channels;
    for (s, &width) in cfg.channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let id = format!("s{s}b{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            h /= stride;
            w /= stride;
            let base = params.len();
            params.push(Parameter::new(
                format!("{id}.conv.weight"),
                ParamKind::ConvWeight,
                he(vec![width, cin, 3, 3], cin * 9),
            ));
            params.push(Parameter::new(
                format!("{id}.conv.bias"),
                ParamKind::ConvBias,
                Tensor::zeros(vec![width]),
            ));
            params.push(Parameter::new(
                format!("{id}.bn.scale"),
                ParamKind::NormScale,
                Tensor::full(vec![width], 1.0),
            ));
            params.push(Parameter::new(
                format!("{id}.bn.shift"),
                ParamKind::NormShift,
                Tensor::zeros(vec![width]),
            ));
            running.push(RunningStats {
                mean: vec![0.0; width],
                var: vec![1.0; width],
            });
            blocks.push(Block {
                id,
                stride,
                params: [base, base + 1, base + 2, base + 3],
                out_shape: [width, h, w],
            });
            cin = width;
        }
    }
    let (features, outputs) = match cfg.head {
        Head::Classify => (cin, cfg.n_classes),
        Head::Regress => (cin * h * w, cfg.n_outputs),
    };
    let head = [params.len(), params.len() + 1];
    params.push(Parameter::new(
        "head.weight",
        ParamKind::DenseWeight,
        he(vec![outputs, features], features),
    ));
    params.push(Parameter::new(
        "head.bias",
        ParamKind::DenseBias,
        Tensor::zeros(vec![outputs]),
    ));

    let tap_blocks: Vec<usize> = match &cfg.taps {
        None => (0..blocks.len()).collect(),
        Some(ids) => {
            if ids.is_empty() {
                return Err(Error::InvalidArgument("tap list must not be empty".into()));
            }
            let mut idx = Vec::with_capacity(ids.len());
            for id in ids {
                let i = blocks
                    .iter()
                    .position(|b| &b.id == id)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown tap id {id:?}")))?;
                if idx.last().is_some_and(|&last| last >= i) {
                    return Err(Error::InvalidArgument(
                        "tap ids must be unique and in network order".into(),
                    ));
                }
                idx.push(i);
            }
            idx
        }
    };
    let taps = tap_blocks
        .iter()
        .map(|&i| TapPoint {
            layer_id: blocks[i].id.clone(),
            position: TapPosition::PostNormPreActivation,
            expected_shape: blocks[i].out_shape,
        })
        .collect();
    Ok(Model {
        config: cfg.clone(),
        params,
        running,
        blocks,
        head,
        taps,
        tap_blocks,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tap_points(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    /// Ids of every normalization site, in network order.
    pub fn block_ids(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.id.as_str()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.config.input_resolution;
        if shape.len() != 4
            || shape[0] == 0
            || shape[1] != self.config.in_channels
            || shape[2] != h
            || shape[3] != w
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected N x {} x {h} x {w} with N >= 1, got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. In [`NormMode::Train`] the running
    /// statistics move toward the batch statistics; other modes leave the model
    /// untouched. Parameters outside `scope` enter the tape as constants.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Var,
        mode: NormMode,
        scope: &GradScope,
    ) -> Result<ForwardPass> {
        self.check_input(tape.shape(input))?;
        let record = |tape: &mut Tape, i: usize| {
            let p = &self.params[i];
            if scope.includes(p.kind) {
                tape.param(i, p)
            } else {
                tape.constant(p.tensor.clone())
            }
        };
        let mut vars = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let [wi, bi, si, hi] = block.params;
            vars.push([
                record(tape, wi),
                record(tape, bi),
                record(tape, si),
                record(tape, hi),
            ]);
        }
        let head = [record(tape, self.head[0]), record(tape, self.head[1])];

        let mut x = tape.affine(
            input,
            1.0 / self.config.input_std,
            -self.config.input_mean / self.config.input_std,
        )?;
        let mut norm_out = Vec::with_capacity(self.blocks.len());
        for ((block, v), stats) in self.blocks.iter().zip(&vars).zip(self.running.iter_mut()) {
            let y = tape.conv2d(x, v[0], v[1], block.stride, 1)?;
            let (y, _) = tape.batch_norm2d(
                y,
                v[2],
                v[3],
                &mut stats.mean,
                &mut stats.var,
                mode,
                self.config.bn_momentum,
                self.config.bn_epsilon,
            )?;
            norm_out.push(y);
            x = tape.relu(y)?;
        }
        let output = match self.config.head {
            Head::Classify => {
                let pooled = tape.global_avg_pool(x)?;
                tape.dense(pooled, head[0], head[1])?
            }
            Head::Regress => {
                let flat = tape.flatten(x)?;
                let z = tape.dense(flat, head[0], head[1])?;
                tape.sigmoid(z)?
            }
        };
        let taps = self.tap_blocks.iter().map(|&i| norm_out[i]).collect();
        Ok(ForwardPass { output, taps })
    }

    /// Eval-mode forward returning the output and every tap activation.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = scratch.forward(&mut tape, x, NormMode::Eval, &GradScope::None)?;
        let taps = pass.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(pass.output).clone(), taps))
    }

    /// Eval-mode output only, processed in chunks.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer_with(batch, NormMode::Eval)
    }

    /// Output with normalization in `mode` (`Eval` or `TestBatch`); the model is not modified.
    pub fn infer_with(&self, batch: &Tensor, mode: NormMode) -> Result<Tensor> {
        if mode == NormMode::Train {
            return Err(Error::InvalidArgument(
                "infer does not run in train mode".into(),
            ));
        }
        self.check_input(batch.shape())?;
        let n = batch.shape()[0];
        // batch-statistics modes must see the whole batch at once
        let chunk = if mode == NormMode::Eval {
            EVAL_CHUNK
        } else {
            n
        };
        let mut scratch = self.clone();
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(chunk) {
            let mut tape = Tape::new();
            let x = tape.constant(batch.slice_rows(start, (start + chunk).min(n))?);
            let pass = scratch.forward(&mut tape, x, mode, &GradScope::None)?;
            let value = tape.value(pass.output);
            width = value.shape()[1];
            out.extend_from_slice(value.data());
        }
        Tensor::new(vec![n, width], out)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        Ok(decode(self.config.head, &self.infer(batch)?))
    }

    pub fn accuracy(&self, ds: &SyntheticDataset) -> Result<f64> {
        let Targets::Classes(labels) = &ds.targets else {
            return Err(Error::Capability("accuracy needs class labels".into()));
        };
        if ds.is_empty() {
            return Err(Error::InvalidArgument(
                "accuracy of an empty dataset".into(),
            ));
        }
        let out = self.infer(&ds.images)?;
        Ok(batch_accuracy(&out, labels))
    }

    pub fn regression_mse(&self, ds: &SyntheticDataset) -> Result<f64> {
        let Targets::Boxes(boxes) = &ds.targets else {
            return Err(Error::Capability("regression_mse needs box targets".into()));
        };
        if ds.is_empty() {
            return Err(Error::InvalidArgument(
                "regression_mse of an empty dataset".into(),
            ));
        }
        let out = self.infer(&ds.images)?;
        batch_mse(&out, boxes)
    }
}

fn decode(head: Head, out: &Tensor) -> Prediction {
    let width = out.shape()[1];
    match head {
        Head::Classify => Prediction::Labels(out.data().chunks(width).map(argmax).collect()),
        Head::Regress => Prediction::Boxes(out.data().chunks(width).map(<[f64]>::to_vec).collect()),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let width = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(width)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean squared error over every predicted coordinate.
pub fn batch_mse(pred: &Tensor, boxes: &[[f64; 4]]) -> Result<f64> {
    if pred.shape() != [boxes.len(), 4] {
        return Err(Error::shape(
            "batch_mse",
            format!("predictions {:?} vs {} boxes", pred.shape(), boxes.len()),
        ));
    }
    let sse: f64 = pred
        .data()
        .chunks(4)
        .zip(boxes)
        .flat_map(|(p, b)| p.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sse / pred.len() as f64)
}
