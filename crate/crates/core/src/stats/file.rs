//! Statistics container: magic, version, fingerprint, resolution, then per layer
//! its id, C/H/W, sample count, means and variances. All little-endian.

use std::fs;
use std::path::Path;

use super::{LayerStats, StatsBundle};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

const MAGIC: &[u8; 8] = b"ACTMADST";
const VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn stats_to_bytes(bundle: &StatsBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(bundle.model_fingerprint);
    w.u32(to_u32(bundle.resolution[0], "height")?);
    w.u32(to_u32(bundle.resolution[1], "width")?);
    w.u32(to_u32(bundle.layers.len(), "layer count")?);
    for l in &bundle.layers {
        w.str(&l.layer_id)?;
        for d in l.shape {
            w.u32(to_u32(d, "dimension")?);
        }
        w.u64(l.n_samples);
        w.f64s(&l.mean);
        w.f64s(&l.var);
    }
    Ok(w.buf)
}

pub fn stats_from_bytes(bytes: &[u8]) -> Result<StatsBundle> {
    let mut r = Reader::new(bytes, "statistics file");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let model_fingerprint = r.u64()?;
    let resolution = [r.u32()? as usize, r.u32()? as usize];
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer_id = r.str()?;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let len = shape[0]
            .checked_mul(shape[1])
            .and_then(|v| v.checked_mul(shape[2]))
            .ok_or_else(|| Error::Format(format!("layer {layer_id} dimensions overflow")))?;
        let n_samples = r.u64()?;
        let mean = r.f64s(len)?;
        let var = r.f64s(len)?;
        layers.push(LayerStats {
            layer_id,
            shape,
            mean,
            var,
            n_samples,
        });
    }
    r.finish()?;
    let bundle = StatsBundle {
        model_fingerprint,
        resolution,
        layers,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_stats(bundle: &StatsBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, stats_to_bytes(bundle)?)?;
    Ok(())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<StatsBundle> {
    stats_from_bytes(&fs::read(path)?)
}
