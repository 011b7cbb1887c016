//! Dense f64 tensors, named parameters and a tape-based reverse-mode autodiff.
//!
//! Layout is fixed to row-major; image tensors are always NCHW.

mod kernels;
mod tape;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::conv2d_output_size;
pub use tape::{Gradients, NormMode, NormStats, Pooling, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} holds {expected} values but data has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "gradient has {} values, tensor has {}",
                    delta.len(),
                    self.data.len()
                ),
            ));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected a single value, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `start..end` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_rows", "rank-0 tensor"))?;
        if start > end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} out of bounds for leading dim {rows}"),
            ));
        }
        let stride = self.data.len() / rows.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    pub fn is_affine(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::DenseWeight => "dense_weight",
            ParamKind::DenseBias => "dense_bias",
        };
        f.write_str(s)
    }
}

/// The kinds touched by an affine-only update.
pub fn affine_mask() -> BTreeSet<ParamKind> {
    [ParamKind::NormScale, ParamKind::NormShift]
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            kind,
            tensor: tensor.with_requires_grad(true),
        }
    }
}

/// Plain gradient descent: `p <- p - lr * grad` for every parameter whose kind is
/// in `mask` (all parameters when `mask` is `None`), then clears every gradient.
pub fn sgd_step(
    params: &mut [Parameter],
    lr: f64,
    mask: Option<&BTreeSet<ParamKind>>,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let selected = |p: &Parameter| mask.map_or(true, |m| m.contains(&p.kind));
    if let Some(p) = params
        .iter()
        .find(|p| selected(p) && p.tensor.grad.is_none())
    {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        if selected(p) {
            let grad = p.tensor.grad.take().expect("checked above");
            p.tensor
                .data
                .iter_mut()
                .zip(&grad)
                .for_each(|(w, g)| *w -= lr * g);
        }
        p.tensor.grad = None;
    }
    Ok(())
}

/// Euclidean norm of the concatenated parameter values.
pub fn param_norm(params: &[Parameter]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.tensor.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two parameter lists with identical layout.
pub fn param_distance(a: &[Parameter], b: &[Parameter]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.tensor.data.iter().zip(&y.tensor.data))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
