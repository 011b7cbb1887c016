//! Ordered batch streams built from segment schedules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_corruption, mix_seed, CorruptionSpec, SyntheticDataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a segment shows: untouched images or one corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Corrupted(CorruptionSpec),
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".to_string(),
            Condition::Corrupted(spec) => spec.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub condition: Condition,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleSchedule {
    pub segments: Vec<Segment>,
}

impl CycleSchedule {
    pub fn single(condition: Condition, n_images: usize) -> Self {
        Self {
            segments: vec![Segment {
                condition,
                n_images,
            }],
        }
    }

    pub fn validate(&self, batch_size: usize, dataset_len: usize) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument("schedule has no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.n_images < batch_size {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} has {} images, fewer than the batch size {batch_size}",
                    seg.n_images
                )));
            }
            if seg.n_images > dataset_len {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} asks for {} images but the dataset has {dataset_len}",
                    seg.n_images
                )));
            }
            if let Condition::Corrupted(spec) = &seg.condition {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Sum over segments of ceil(n_images / batch_size).
    pub fn total_batches(&self, batch_size: usize) -> usize {
        self.segments
            .iter()
            .map(|s| s.n_images.div_ceil(batch_size))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub images: Tensor,
    /// Ground truth for measurement; `None` when the stream is unlabelled.
    pub targets: Option<Targets>,
    pub segment: usize,
    /// Dataset indices of the images in this batch.
    pub indices: Vec<usize>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn without_targets(mut self) -> Self {
        self.targets = None;
        self
    }
}

/// Concatenates the schedule's segments in order. Segment `s` draws the first
/// `n_images` dataset images in an order shuffled from `(seed, s)`, applies its
/// condition (image `i` corrupted with `spec.for_sample(i)`) and is cut into
/// batches of `batch_size`; only the last batch of a segment may be short.
pub fn build_cycle_stream(
    dataset: &SyntheticDataset,
    schedule: &CycleSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    schedule.validate(batch_size, dataset.len())?;
    let [c, h, w] = dataset.image_shape();
    let per_image = c * h * w;
    let mut stream = Vec::with_capacity(schedule.total_batches(batch_size));
    for (s, seg) in schedule.segments.iter().enumerate() {
        let mut order: Vec<usize> = (0..seg.n_images).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, s as u64)));
        for chunk in order.chunks(batch_size) {
            let (mut images, targets) = dataset.batch(chunk);
            if let Condition::Corrupted(spec) = &seg.condition {
                for (slot, &i) in images.data_mut().chunks_mut(per_image).zip(chunk) {
                    let img = apply_corruption(&dataset.image(i), &spec.for_sample(i))?;
                    slot.copy_from_slice(&img.data);
                }
            }
            stream.push(StreamBatch {
                images,
                targets: Some(targets),
                segment: s,
                indices: chunk.to_vec(),
            });
        }
    }
    Ok(stream)
}
