//! Model container: magic, version, config JSON, parameter count, then one record
//! per parameter (name, rank, u64 dims, f64 payload). Running normalization
//! statistics follow the trainable parameters under the `running.` prefix.

use std::fs;
use std::path::Path;

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

const MAGIC: &[u8; 8] = b"ACTMADMD";
const VERSION: u32 = 1;
const RUNNING_PREFIX: &str = "running.";

fn records(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data()))
        .collect();
    for (block, stats) in model.blocks.iter().zip(&model.running) {
        let c = stats.mean.len();
        out.push((
            format!("{RUNNING_PREFIX}{}.bn.mean", block.id),
            vec![c],
            &stats.mean,
        ));
        out.push((
            format!("{RUNNING_PREFIX}{}.bn.var", block.id),
            vec![c],
            &stats.var,
        ));
    }
    out
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&serde_json::to_string(&model.config)?)?;
    let recs = records(model);
    w.u32(recs.len() as u32);
    for (name, dims, data) in recs {
        w.str(&name)?;
        w.u32(dims.len() as u32);
        dims.iter().for_each(|&d| w.u64(d as u64));
        w.f64s(data);
    }
    Ok(w.buf)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let config: ModelConfig = serde_json::from_str(&r.str()?)?;
    let mut model = build_model(&config)?;
    let expected: Vec<(String, Vec<usize>)> = records(&model)
        .into_iter()
        .map(|(name, dims, _)| (name, dims))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            expected.len()
        )));
    }
    let mut payloads = Vec::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &name != want_name || &dims != want_dims {
            return Err(Error::Format(format!(
                "expected parameter {want_name} {want_dims:?}, found {name} {dims:?}"
            )));
        }
        payloads.push(r.f64s(dims.iter().product())?);
    }
    r.finish()?;
    let mut payloads = payloads.into_iter();
    for p in model.params.iter_mut() {
        p.tensor
            .data_mut()
            .copy_from_slice(&payloads.next().expect("counted"));
    }
    for stats in model.running.iter_mut() {
        stats.mean = payloads.next().expect("counted");
        stats.var = payloads.next().expect("counted");
        if stats.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invariant(
                "running variance must be nonnegative".into(),
            ));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
