use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, ConvGeom};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// How batch normalization picks its normalizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated by exponential moving average.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
    /// Batch statistics without touching the running statistics.
    TestBatch,
}

/// Which axes a moment reduction pools over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Over the leading (batch) axis only: one statistic per remaining element.
    Batch,
    /// Over batch and spatial axes of an NCHW tensor: one statistic per channel.
    BatchSpatial,
}

/// Per-channel batch statistics observed by a batch-normalization op.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Entropy {
        logits: Var,
        log_probs: Vec<f64>,
        entropies: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Sum(Var),
    AddAll(Vec<Var>),
    Scale(Var, f64),
    Moment {
        input: Var,
        order: u32,
        pooling: Pooling,
        mean: Vec<f64>,
        lower: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Wengert list of executed operations. Values are recorded eagerly; `backward`
/// replays adjoints once, newest node first.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(
            v.tape, self.id,
            "Var used with a tape it was not recorded on"
        );
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = parents.iter().any(|p| self.node(*p).needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records an input. It receives a gradient only if `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            needs_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records parameter `index` of some parameter list; [`Gradients::accumulate_into`]
    /// later routes its gradient back to that slot.
    pub fn param(&mut self, index: usize, param: &Parameter) -> Var {
        let mut value = param.tensor.clone();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            needs_grad: true,
            op: Op::Param(index),
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input, OIKK weight, O bias; got {is:?}, {ws:?}, {bs:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if bs[0] != o {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} entries but weight has {o} output channels",
                    bs[0]
                ),
            ));
        }
        let (ho, wo) = match (
            kernels::conv2d_output_size(h, kh, stride, padding),
            kernels::conv2d_output_size(w, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh} does not fit input {h}x{w} with padding {padding}"),
                ))
            }
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    /// Batch normalization over an NCHW tensor.
    ///
    /// In [`NormMode::Train`] the running statistics are blended toward the batch
    /// statistics with weight `momentum`. Batch variance is the population (1/M) form.
    /// Returns the batch statistics whenever they were used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: NormMode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<(Var, Option<NormStats>)> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let is = self.shape(input).to_vec();
        if is.len() != 4 {
            return Err(Error::shape(
                "batch_norm2d",
                format!("expected NCHW input, got {is:?}"),
            ));
        }
        let (n, c, hw) = (is[0], is[1], is[2] * is[3]);
        for (what, len) in [
            ("scale", self.value(scale).len()),
            ("shift", self.value(shift).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{what} has {len} entries, input has {c} channels"),
                ));
            }
        }
        let batch_stats = mode != NormMode::Eval;
        let count = n * hw;
        if batch_stats && count < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm2d needs at least two values per channel in batch mode".into(),
            ));
        }
        let x = self.value(input).data();
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for s_i in 0..n {
                    s += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0;
                for s_i in 0..n {
                    q += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = q / count as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let stats = batch_stats.then(|| NormStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        if mode == NormMode::Train {
            for ch in 0..c {
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
                running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch];
            }
        }
        let value = Tensor::new(is, out)?;
        let var = self.push(
            "batch_norm2d",
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, scale, shift],
        )?;
        Ok((var, stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out: Vec<f64> = v.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out: Vec<f64> = v.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    /// `y = x W^T + b` with `x: N x I`, `W: O x I`, `b: O`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != is[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("input {is:?}, weight {ws:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (n, i, o) = (is[0], is[1], ws[0]);
        let out = kernels::dense_forward(
            n,
            i,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, o], out)?;
        self.push(
            "dense",
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = *s
            .first()
            .ok_or_else(|| Error::shape("flatten", "rank-0 input"))?;
        let rest = s[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.chunks(classes) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|z| z - lse));
        }
        out
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lp = Self::log_softmax_rows(self.value(logits).data(), c);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| lp[i * c + l])
            .sum::<f64>()
            / n as f64;
        let probs = lp.iter().map(|v| v.exp()).collect();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean Shannon entropy (nats) of the row-wise softmax of `logits`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape(
                "softmax_entropy",
                format!("expected N x C logits, got {s:?}"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let log_probs = Self::log_softmax_rows(self.value(logits).data(), c);
        let entropies: Vec<f64> = log_probs
            .chunks(c)
            .map(|row| -row.iter().map(|lp| lp.exp() * lp).sum::<f64>())
            .collect();
        let loss = entropies.iter().sum::<f64>() / n as f64;
        self.push(
            "softmax_entropy",
            Tensor::scalar(loss),
            Op::Entropy {
                logits,
                log_probs,
                entropies,
            },
            &[logits],
        )
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        if p.is_empty() {
            return Err(Error::shape("mse", "empty input"));
        }
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(
            "mse",
            Tensor::scalar(loss),
            Op::Mse { pred, target },
            &[pred, target],
        )
    }

    /// Sum of element-wise absolute differences. The subgradient at zero is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("l1_distance", a, b)?;
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
        self.push(
            "l1_distance",
            Tensor::scalar(loss),
            Op::L1 { a, b },
            &[a, b],
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Sum of scalar vars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &t in terms {
            total += self.value(t).item()?;
        }
        self.push(
            "add_all",
            Tensor::scalar(total),
            Op::AddAll(terms.to_vec()),
            terms,
        )
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.affine(input, factor, 0.0)
    }

    /// Element-wise `factor * x + offset`.
    pub fn affine(&mut self, input: Var, factor: f64, offset: f64) -> Result<Var> {
        let v = self.value(input);
        let out = v.data().iter().map(|x| x * factor + offset).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("affine", value, Op::Scale(input, factor), &[input])
    }

    /// Moment of order `order` over the pooled axes: the mean for order 1, the
    /// central moment `E[(x - mean)^k]` (population normalization) for order k >= 2.
    pub fn moment(&mut self, input: Var, order: u32, pooling: Pooling) -> Result<Var> {
        if order == 0 {
            return Err(Error::InvalidArgument("moment order must be >= 1".into()));
        }
        let shape = self.shape(input).to_vec();
        let layout = PoolLayout::new(&shape, pooling)?;
        let x = self.value(input).data();
        let mut mean = vec![0.0; layout.groups];
        layout.for_each(|i, g| mean[g] += x[i]);
        let m = layout.count as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        let (value, lower) = if order == 1 {
            (mean.clone(), Vec::new())
        } else {
            let mut acc = vec![0.0; layout.groups];
            let mut low = vec![0.0; layout.groups];
            let k = order as i32;
            layout.for_each(|i, g| {
                let d = x[i] - mean[g];
                let p = d.powi(k - 1);
                low[g] += p;
                acc[g] += p * d;
            });
            acc.iter_mut().for_each(|v| *v /= m);
            low.iter_mut().for_each(|v| *v /= m);
            (acc, low)
        };
        let value = Tensor::new(layout.out_shape.clone(), value)?;
        self.push(
            "moment",
            value,
            Op::Moment {
                input,
                order,
                pooling,
                mean,
                lower,
            },
            &[input],
        )
    }

    /// Replays adjoints from scalar `loss` back to every node that needs them.
    /// The tape is consumed: a second call returns [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        let mut visited = Vec::new();
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p, n.value.len())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
            visited,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.index].needs_grad;
        let mut add = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.index];
            match slot {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let r = kernels::conv2d_backward(
                    geom,
                    self.nodes[input.index].value.data(),
                    self.nodes[weight.index].value.data(),
                    g,
                    (wants(*input), wants(*weight), wants(*bias)),
                );
                if let Some(d) = r.input {
                    add(*input, d);
                }
                if let Some(d) = r.weight {
                    add(*weight, d);
                }
                if let Some(d) = r.bias {
                    add(*bias, d);
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma = self.nodes[scale.index].value.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for si in 0..n {
                    for ch in 0..c {
                        let base = (si * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(*input) {
                    let m = (n * hw) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for si in 0..n {
                        for ch in 0..c {
                            let base = (si * c + ch) * hw;
                            let k = gamma[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    add(*input, dx);
                }
                if wants(*scale) {
                    add(*scale, sum_dy_xhat);
                }
                if wants(*shift) {
                    add(*shift, sum_dy);
                }
            }
            Op::Relu(input) => {
                let x = self.nodes[input.index].value.data();
                add(
                    *input,
                    x.iter()
                        .zip(g)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                add(
                    *input,
                    y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.index].value.shape();
                let (n, i) = (xs[0], xs[1]);
                let o = node.value.shape()[1];
                if wants(*input) {
                    let w = self.nodes[weight.index].value.data();
                    add(*input, kernels::dense_backward_input(n, i, o, g, w));
                }
                if wants(*weight) {
                    let x = self.nodes[input.index].value.data();
                    add(*weight, kernels::dense_backward_weight(n, i, o, g, x));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add(*bias, db);
                }
            }
            Op::GlobalAvgPool(input) => {
                let s = self.nodes[input.index].value.shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for gv in g {
                    dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                add(*input, dx);
            }
            Op::Reshape(input) => add(*input, g.to_vec()),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= g[0] / n as f64;
                }
                add(*logits, d);
            }
            Op::Entropy {
                logits,
                log_probs,
                entropies,
            } => {
                let n = entropies.len();
                let c = log_probs.len() / n;
                let mut d = vec![0.0; log_probs.len()];
                for (i, h) in entropies.iter().enumerate() {
                    for j in 0..c {
                        let lp = log_probs[i * c + j];
                        d[i * c + j] = -g[0] / n as f64 * lp.exp() * (lp + h);
                    }
                }
                add(*logits, d);
            }
            Op::Mse { pred, target } => {
                let p = self.nodes[pred.index].value.data();
                let t = self.nodes[target.index].value.data();
                let k = 2.0 * g[0] / p.len() as f64;
                let d: Vec<f64> = p.iter().zip(t).map(|(a, b)| k * (a - b)).collect();
                if wants(*target) {
                    add(*target, d.iter().map(|v| -v).collect());
                }
                if wants(*pred) {
                    add(*pred, d);
                }
            }
            Op::L1 { a, b } => {
                let x = self.nodes[a.index].value.data();
                let y = self.nodes[b.index].value.data();
                let d: Vec<f64> = x.iter().zip(y).map(|(x, y)| g[0] * sign(x - y)).collect();
                if wants(*b) {
                    add(*b, d.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    add(*a, d);
                }
            }
            Op::Sum(input) => {
                let n = self.nodes[input.index].value.len();
                add(*input, vec![g[0]; n]);
            }
            Op::AddAll(terms) => {
                for t in terms {
                    if wants(*t) {
                        add(*t, vec![g[0]]);
                    }
                }
            }
            Op::Scale(input, factor) => add(*input, g.iter().map(|v| v * factor).collect()),
            Op::Moment {
                input,
                order,
                pooling,
                mean,
                lower,
            } => {
                let x = self.nodes[input.index].value.data();
                let layout = PoolLayout::new(self.nodes[input.index].value.shape(), *pooling)?;
                let m = layout.count as f64;
                let mut dx = vec![0.0; x.len()];
                if *order == 1 {
                    layout.for_each(|i, grp| dx[i] = g[grp] / m);
                } else {
                    let k = *order as i32;
                    layout.for_each(|i, grp| {
                        let d = x[i] - mean[grp];
                        dx[i] = g[grp] * k as f64 / m * (d.powi(k - 1) - lower[grp]);
                    });
                }
                add(*input, dx);
            }
        }
        Ok(())
    }
}

struct PoolLayout {
    groups: usize,
    count: usize,
    out_shape: Vec<usize>,
    // (batch, channel, spatial) extents
    n: usize,
    c: usize,
    hw: usize,
    pooling: Pooling,
}

impl PoolLayout {
    fn new(shape: &[usize], pooling: Pooling) -> Result<Self> {
        match pooling {
            Pooling::Batch => {
                let n = *shape
                    .first()
                    .ok_or_else(|| Error::shape("moment", "rank-0 input"))?;
                let inner: usize = shape[1..].iter().product();
                if n == 0 {
                    return Err(Error::shape("moment", "empty batch"));
                }
                Ok(Self {
                    groups: inner,
                    count: n,
                    out_shape: shape[1..].to_vec(),
                    n,
                    c: inner,
                    hw: 1,
                    pooling,
                })
            }
            Pooling::BatchSpatial => {
                if shape.len() != 4 || shape[0] == 0 {
                    return Err(Error::shape(
                        "moment",
                        format!("channel pooling needs a non-empty NCHW tensor, got {shape:?}"),
                    ));
                }
                let hw = shape[2] * shape[3];
                Ok(Self {
                    groups: shape[1],
                    count: shape[0] * hw,
                    out_shape: vec![shape[1]],
                    n: shape[0],
                    c: shape[1],
                    hw,
                    pooling,
                })
            }
        }
    }

    /// Calls `f(flat_index, group)` for every input element, in memory order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match self.pooling {
            Pooling::Batch => {
                for s in 0..self.n {
                    for g in 0..self.c {
                        f(s * self.c + g, g);
                    }
                }
            }
            Pooling::BatchSpatial => {
                for s in 0..self.n {
                    for g in 0..self.c {
                        let base = (s * self.c + g) * self.hw;
                        for i in base..base + self.hw {
                            f(i, g);
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize, usize)>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is reachable from it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads[v.index].as_deref()
    }

    /// Node indices in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Adds each recorded parameter's gradient into `params[index]`. Parameters that
    /// were recorded but are unreachable from the loss receive a zero gradient.
    pub fn accumulate_into(&self, params: &mut [Parameter]) -> Result<()> {
        let available = params.len();
        for &(node, index, len) in &self.params {
            let p = params.get_mut(index).ok_or_else(|| {
                Error::shape(
                    "accumulate_into",
                    format!("tape refers to parameter {index} but only {available} were given"),
                )
            })?;
            match &self.grads[node] {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => p.tensor.accumulate_grad(&vec![0.0; len])?,
            }
        }
        Ok(())
    }
}
