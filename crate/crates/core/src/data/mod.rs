//! Procedural datasets, corruptions and shift streams.
//!
//! Everything here is a pure function of its seed: each sample is rendered from its
//! own ChaCha stream, so datasets and corrupted copies can be regenerated on demand.

mod cache;
mod corrupt;
mod stream;

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cache::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset};
pub use corrupt::{
    apply_corruption, corrupt_dataset, severity_table, CorruptionKind, CorruptionSpec,
};
pub use stream::{build_cycle_stream, Condition, CycleSchedule, Segment, StreamBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Localization,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Localization => "localization",
        })
    }
}

/// Supervision attached to a batch of images. Used for measurement only at test time.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Normalized (cx, cy, w, h) per image.
    Boxes(Vec<[f64; 4]>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Boxes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Boxes(b) => Targets::Boxes(indices.iter().map(|&i| b[i]).collect()),
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Targets::Classes(_) => TaskKind::Classification,
            Targets::Boxes(_) => TaskKind::Localization,
        }
    }
}

/// A single image in CHW layout with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Image::new",
                format!(
                    "{channels}x{height}x{width} image needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// N x C x H x W.
    pub images: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn new(images: Tensor, targets: Targets, split: Split, seed: u64) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != targets.len() {
            return Err(Error::shape(
                "SyntheticDataset",
                format!("images {:?} vs {} targets", images.shape(), targets.len()),
            ));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("dataset pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            targets,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W).
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn task(&self) -> TaskKind {
        self.targets.task()
    }

    pub fn image(&self, index: usize) -> Image {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        Image {
            channels: c,
            height: h,
            width: w,
            data: self.images.data()[index * n..(index + 1) * n].to_vec(),
        }
    }

    /// Gathers `indices` into an N x C x H x W batch and its targets.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Targets) {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let images =
            Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch shape");
        (images, self.targets.select(indices))
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, targets) = self.batch(&idx);
        Self {
            images,
            targets,
            split: self.split,
            seed: self.seed,
        }
    }
}

/// SplitMix64 finalizer used to derive independent per-sample seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    rng.set_stream(split.stream());
    rng
}

/// Number of procedural texture families available for classification.
pub const TEXTURE_FAMILIES: usize = 4;

/// Renders a balanced classification set. Class `k` is one texture family:
/// 0 oriented gratings, 1 Gaussian blobs, 2 checkerboards, 3 concentric rings.
/// Labels cycle through the classes, so any prefix of `k * n_classes` samples
/// is balanced.
pub fn generate_classification_dataset(
    seed: u64,
    split: Split,
    n_classes: usize,
    n: usize,
    resolution: usize,
    channels: usize,
) -> Result<SyntheticDataset> {
    if n_classes < 2 || n_classes > TEXTURE_FAMILIES {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be in 2..={TEXTURE_FAMILIES}, got {n_classes}"
        )));
    }
    if n == 0 || n % n_classes != 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset size {n} must be a positive multiple of n_classes {n_classes}"
        )));
    }
    if resolution < 8 || channels == 0 {
        return Err(Error::InvalidArgument(
            "resolution must be >= 8 and channels >= 1".into(),
        ));
    }
    let plane = resolution * resolution;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        let mut rng = sample_rng(seed, split, i);
        let img = render_texture(&mut rng, label, resolution, channels);
        data.extend(img);
        labels.push(label);
    }
    let images = Tensor::new(vec![n, channels, resolution, resolution], data)?;
    SyntheticDataset::new(images, Targets::Classes(labels), split, seed)
}

fn render_texture(rng: &mut ChaCha8Rng, family: usize, res: usize, channels: usize) -> Vec<f64> {
    let r = res as f64;
    let background = rng.random_range(0.4..0.6);
    let amplitude = rng.random_range(0.35..0.45);
    let mut pattern = vec![0.0; res * res];
    match family {
        0 => {
            let theta = rng.random_range(0.0..PI);
            let period = rng.random_range(6.0..10.0) * r / 32.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            for y in 0..res {
                for x in 0..res {
                    let u = x as f64 * c + y as f64 * s;
                    pattern[y * res + x] = (2.0 * PI * u / period + phase).sin();
                }
            }
        }
        1 => {
            let count = rng.random_range(2..=4);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85) * r,
                        rng.random_range(0.15..0.85) * r,
                        rng.random_range(3.0..5.0) * r / 32.0,
                        if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    )
                })
                .collect();
            for y in 0..res {
                for x in 0..res {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(bx, by, s, sign)| {
                            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                            sign * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    pattern[y * res + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        2 => {
            let cell = rng.random_range(4.0..6.0) * r / 32.0;
            let (ox, oy) = (
                rng.random_range(0.0..2.0 * cell),
                rng.random_range(0.0..2.0 * cell),
            );
            let theta = rng.random_range(-0.3..0.3f64);
            let (c, s) = (theta.cos(), theta.sin());
            for y in 0..res {
                for x in 0..res {
                    let (xf, yf) = (x as f64, y as f64);
                    let u = xf * c - yf * s + ox;
                    let v = xf * s + yf * c + oy;
                    let q = (PI * u / cell).sin() * (PI * v / cell).sin();
                    pattern[y * res + x] = (3.0 * q).tanh();
                }
            }
        }
        _ => {
            let (cx, cy) = (
                rng.random_range(0.3..0.7) * r,
                rng.random_range(0.3..0.7) * r,
            );
            let period = rng.random_range(6.0..10.0) * r / 32.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..res {
                for x in 0..res {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    pattern[y * res + x] = (2.0 * PI * d / period + phase).sin();
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut out = Vec::with_capacity(channels * res * res);
    for _ in 0..channels {
        // mild per-channel tint so multi-channel images are not exact copies
        let tint = if channels == 1 {
            0.0
        } else {
            rng.random_range(-0.05..0.05)
        };
        for p in &pattern {
            let v = background + tint + amplitude * p + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Renders a single bright rectangle on a sky/ground scene. Targets are the
/// normalized (cx, cy, w, h) of the rendered box; object centres are biased
/// toward the lower half of the frame.
pub fn generate_localization_dataset(
    seed: u64,
    split: Split,
    n: usize,
    resolution: usize,
    channels: usize,
) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be positive".into(),
        ));
    }
    if resolution < 8 || channels == 0 {
        return Err(Error::InvalidArgument(
            "resolution must be >= 8 and channels >= 1".into(),
        ));
    }
    let res = resolution;
    let r = res as f64;
    let plane = res * res;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut boxes = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    for i in 0..n {
        let mut rng = sample_rng(seed, split, i);
        let horizon = rng.random_range(0.3..0.45) * r;
        let sky = rng.random_range(0.6..0.75);
        let ground = rng.random_range(0.2..0.35);
        let stripe_period = rng.random_range(3.0..6.0) * r / 32.0;
        // box size in whole pixels keeps the rendered extent equal to the target
        let bw = rng.random_range((0.15 * r).round() as usize..=(0.3 * r).round() as usize);
        let bh = rng.random_range((0.12 * r).round() as usize..=(0.25 * r).round() as usize);
        let x0 = rng.random_range(0..=res - bw);
        let lower = rng.random_bool(0.8);
        let y_min = if lower {
            ((0.5 * r) as usize).min(res - bh)
        } else {
            (0.15 * r) as usize
        };
        let y0 = rng.random_range(y_min..=res - bh);
        let brightness = rng.random_range(0.85..0.98);
        let mut pattern = vec![0.0; plane];
        for y in 0..res {
            for x in 0..res {
                let yf = y as f64 + 0.5;
                let v = if yf < horizon {
                    sky - 0.15 * yf / horizon
                } else {
                    let depth = (yf - horizon) / (r - horizon);
                    ground
                        + 0.06
                            * (2.0 * PI * (x as f64 + 0.5 - r / 2.0) * depth / stripe_period).sin()
                };
                let inside = x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh;
                pattern[y * res + x] = if inside { brightness } else { v };
            }
        }
        for _ in 0..channels {
            for p in &pattern {
                data.push((p + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        boxes.push([
            (x0 as f64 + bw as f64 / 2.0) / r,
            (y0 as f64 + bh as f64 / 2.0) / r,
            bw as f64 / r,
            bh as f64 / r,
        ]);
    }
    let images = Tensor::new(vec![n, channels, res, res], data)?;
    SyntheticDataset::new(images, Targets::Boxes(boxes), split, seed)
}

/// Dispatches to the generator for `task`.
pub fn generate_dataset(
    task: TaskKind,
    seed: u64,
    split: Split,
    n_classes: usize,
    n: usize,
    resolution: usize,
    channels: usize,
) -> Result<SyntheticDataset> {
    match task {
        TaskKind::Classification => {
            generate_classification_dataset(seed, split, n_classes, n, resolution, channels)
        }
        TaskKind::Localization => {
            generate_localization_dataset(seed, split, n, resolution, channels)
        }
    }
}
