//! Dataset container: magic, version, metadata JSON, f64 pixels, then labels.
//!
//! Class labels are stored as u64, boxes as four f64 each.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Split, SyntheticDataset, Targets, TaskKind};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ACTMADDS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    task: TaskKind,
    split: Split,
    seed: u64,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
}

pub fn dataset_to_bytes(ds: &SyntheticDataset) -> Result<Vec<u8>> {
    let [channels, height, width] = ds.image_shape();
    let meta = Meta {
        task: ds.task(),
        split: ds.split,
        seed: ds.seed,
        n: ds.len(),
        channels,
        height,
        width,
    };
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&serde_json::to_string(&meta)?)?;
    w.f64s(ds.images.data());
    match &ds.targets {
        Targets::Classes(c) => c.iter().for_each(|&l| w.u64(l as u64)),
        Targets::Boxes(b) => b.iter().for_each(|bx| w.f64s(bx)),
    }
    Ok(w.buf)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<SyntheticDataset> {
    let mut r = Reader::new(bytes, "dataset file");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let meta: Meta = serde_json::from_str(&r.str()?)?;
    let count = meta
        .n
        .checked_mul(meta.channels)
        .and_then(|v| v.checked_mul(meta.height))
        .and_then(|v| v.checked_mul(meta.width))
        .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
    let pixels = r.f64s(count)?;
    let targets = match meta.task {
        TaskKind::Classification => Targets::Classes(
            (0..meta.n)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<_>>()?,
        ),
        TaskKind::Localization => {
            let raw = r.f64s(
                meta.n
                    .checked_mul(4)
                    .ok_or(Error::UnexpectedEof("dataset file"))?,
            )?;
            let boxes: Vec<[f64; 4]> = raw
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            if boxes.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invariant(
                    "box coordinates must lie in [0, 1]".into(),
                ));
            }
            Targets::Boxes(boxes)
        }
    };
    r.finish()?;
    let images = Tensor::new(vec![meta.n, meta.channels, meta.height, meta.width], pixels)?;
    SyntheticDataset::new(images, targets, meta.split, meta.seed)
}

pub fn save_dataset(ds: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    dataset_from_bytes(&fs::read(path)?)
}
