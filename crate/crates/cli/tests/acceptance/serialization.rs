//! Criterion 9: stats, checkpoint and dataset files written by a real run
//! round-trip bit-exactly, and damaged copies are rejected with typed errors.

use std::fs;
use std::process::Command;

use actmad_cli::ExperimentConfig;
use actmad_core::data::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset};
use actmad_core::model::{model_from_bytes, model_to_bytes};
use actmad_core::stats::{stats_from_bytes, stats_to_bytes};
use actmad_core::Error;

use crate::pipeline::{config, Run};
use crate::Verdict;

type Parse = fn(&[u8]) -> Result<Vec<u8>, Error>;

/// Damaged variants of `bytes` and whether `parse` rejected each with the
/// expected error kind.
fn rejections(bytes: &[u8], parse: Parse) -> Vec<(&'static str, bool)> {
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xff;
    let mut version = bytes.to_vec();
    version[8] = version[8].wrapping_add(1);
    let mut longer = bytes.to_vec();
    longer.push(0);
    vec![
        ("magic", matches!(parse(&magic), Err(Error::Format(_)))),
        ("version", matches!(parse(&version), Err(Error::Format(_)))),
        (
            "truncated",
            matches!(
                parse(&bytes[..bytes.len() - 5]),
                Err(Error::UnexpectedEof(_))
            ),
        ),
        (
            "header only",
            matches!(parse(&bytes[..12]), Err(Error::UnexpectedEof(_))),
        ),
        (
            "trailing byte",
            matches!(parse(&longer), Err(Error::Format(_))),
        ),
    ]
}

fn judge(run: &Run) -> Result<(bool, String), String> {
    let mut notes = Vec::new();
    let mut ok = true;
    let formats: [(&str, Vec<u8>, Parse); 3] = [
        (
            "checkpoint",
            fs::read(run.classify.join("model.ckpt")).map_err(|e| e.to_string())?,
            |b| model_to_bytes(&model_from_bytes(b)?),
        ),
        (
            "stats",
            fs::read(run.classify.join("stats.bin")).map_err(|e| e.to_string())?,
            |b| stats_to_bytes(&stats_from_bytes(b)?),
        ),
        (
            "dataset",
            {
                let cfg = ExperimentConfig::load(
                    &config("localize_shift.json"),
                    &["data.n_test=128".into()],
                )
                .map_err(|e| e.to_string())?;
                let ds = cfg.test_set().map_err(|e| e.to_string())?;
                let path = run.root.join("dataset.bin");
                save_dataset(&ds, &path).map_err(|e| e.to_string())?;
                let back = load_dataset(&path).map_err(|e| e.to_string())?;
                ok &= back == ds;
                fs::read(&path).map_err(|e| e.to_string())?
            },
            |b| dataset_to_bytes(&dataset_from_bytes(b)?),
        ),
    ];
    for (name, bytes, parse) in formats {
        let exact = parse(&bytes).map(|again| again == bytes).unwrap_or(false);
        let rejected = rejections(&bytes, parse);
        let missed: Vec<&str> = rejected.iter().filter(|r| !r.1).map(|r| r.0).collect();
        ok &= exact && missed.is_empty();
        notes.push(format!(
            "{name} {} bytes round-trip {exact}, {}/{} damaged copies rejected{}",
            bytes.len(),
            rejected.len() - missed.len(),
            rejected.len(),
            if missed.is_empty() {
                String::new()
            } else {
                format!(" (accepted: {})", missed.join(" "))
            }
        ));
    }
    let _ = fs::remove_file(run.root.join("dataset.bin"));

    // negative variance is structurally well formed but invalid
    let stats =
        stats_from_bytes(&fs::read(run.classify.join("stats.bin")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mut bad = stats.clone();
    bad.layers[0].var[0] = -1.0;
    let negative = stats_to_bytes(&bad).is_err();
    ok &= negative;

    // the binary reports a damaged statistics file as an I/O failure
    let damaged = run.root.join("damaged_stats.bin");
    let bytes = fs::read(run.classify.join("stats.bin")).map_err(|e| e.to_string())?;
    fs::write(&damaged, &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_actmad"))
        .args(["adapt", "--config"])
        .arg(config("classify_shift.json"))
        .arg("--out")
        .arg(run.root.join("damaged"))
        .arg("--checkpoint")
        .arg(run.classify.join("model.ckpt"))
        .arg("--stats")
        .arg(&damaged)
        .output()
        .map_err(|e| e.to_string())?;
    let _ = fs::remove_file(&damaged);
    let _ = fs::remove_dir_all(run.root.join("damaged"));
    let code = out.status.code();
    ok &= code == Some(3);
    notes.push(format!(
        "negative variance rejected {negative}; cli exit on truncated stats {code:?}"
    ));
    Ok((ok, notes.join("; ")))
}

pub fn criterion(run: Result<&Run, String>) -> Verdict {
    let judged = run.and_then(judge);
    let (pass, detail) = judged.unwrap_or_else(|e| (false, e));
    Verdict {
        id: 9,
        title: "serialization",
        pass,
        detail,
    }
}
