//! Runs the shipped configs through the `actmad` binary and judges criteria 3
//! to 8 and 10 from the files it writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use actmad_cli::report::{parse_float, read_csv, TIMING_LOG};

use crate::Verdict;

const BIN: &str = env!("CARGO_BIN_EXE_actmad");

const CLEAN_ACCURACY_SLACK: f64 = 0.01;
const MAX_CLEAN_DRIFT: f64 = 1e-3;
const MIN_SOURCE_CLEAN: f64 = 0.95;
const MIN_DROP: f64 = 0.15;
const MIN_RECOVERED: f64 = 0.5;
const MIN_KINDS_RECOVERED: usize = 7;
const KINDS: usize = 9;
const MAX_CLASSIFY_SECONDS: f64 = 600.0;
const MIN_MSE_REDUCTION: f64 = 0.30;
const CYCLE_SLACK: f64 = 0.01;
/// Test images per corruption in the localization ablation.
pub const LOCALIZE_ABLATION_IMAGES: usize = 600;

pub fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn actmad(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`actmad {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct Run {
    pub root: PathBuf,
    pub classify: PathBuf,
    pub localize: PathBuf,
    pub cycle: PathBuf,
    pub ablation: PathBuf,
    pub localize_ablation: PathBuf,
    /// Wall time of train, stats and adapt on the classification config.
    pub classify_seconds: f64,
}

impl Run {
    /// Every command of every shipped config, written below `root`.
    pub fn execute(root: &Path) -> Result<Run, String> {
        let _ = fs::remove_dir_all(root);
        let run = Run {
            root: root.to_path_buf(),
            classify: root.join("classify_shift"),
            localize: root.join("localize_shift"),
            cycle: root.join("weather_cycle"),
            ablation: root.join("table5_ablation"),
            localize_ablation: root.join("localize_ablation"),
            classify_seconds: 0.0,
        };
        let cls_cfg = config("classify_shift.json");
        let loc_cfg = config("localize_shift.json");
        let clock = Instant::now();
        for cmd in ["train", "stats", "adapt"] {
            actmad(&[
                cmd,
                "--config",
                path_str(&cls_cfg),
                "--out",
                path_str(&run.classify),
            ])?;
        }
        let classify_seconds = clock.elapsed().as_secs_f64();
        for cmd in ["train", "stats", "adapt"] {
            actmad(&[
                cmd,
                "--config",
                path_str(&loc_cfg),
                "--out",
                path_str(&run.localize),
            ])?;
        }
        let ckpt = run.classify.join("model.ckpt");
        let stats = run.classify.join("stats.bin");
        let shared = ["--checkpoint", path_str(&ckpt), "--stats", path_str(&stats)];
        let cycle_cfg = config("weather_cycle.json");
        let mut args = vec![
            "cycle",
            "--config",
            path_str(&cycle_cfg),
            "--out",
            path_str(&run.cycle),
        ];
        args.extend(shared);
        actmad(&args)?;
        let ablation_cfg = config("table5_ablation.json");
        let mut args = vec![
            "ablate",
            "--config",
            path_str(&ablation_cfg),
            "--out",
            path_str(&run.ablation),
        ];
        args.extend(shared);
        actmad(&args)?;
        let loc_ckpt = run.localize.join("model.ckpt");
        let loc_stats = run.localize.join("stats.bin");
        let n_test = format!("data.n_test={LOCALIZE_ABLATION_IMAGES}");
        actmad(&[
            "ablate",
            "--config",
            path_str(&loc_cfg),
            "--out",
            path_str(&run.localize_ablation),
            "--checkpoint",
            path_str(&loc_ckpt),
            "--stats",
            path_str(&loc_stats),
            "--set",
            &n_test,
        ])?;
        Ok(Run {
            classify_seconds,
            ..run
        })
    }
}

/// CSV rows keyed by their first column.
fn keyed(path: &Path) -> Result<(Vec<String>, BTreeMap<String, Vec<String>>), String> {
    let (header, rows) = read_csv(path).map_err(|e| format!("{e:#}"))?;
    Ok((
        header,
        rows.into_iter().map(|r| (r[0].clone(), r)).collect(),
    ))
}

fn cell(header: &[String], row: &[String], column: &str) -> Result<Option<f64>, String> {
    let i = header
        .iter()
        .position(|h| h == column)
        .ok_or(format!("no column {column}"))?;
    Ok(parse_float(&row[i]))
}

fn num(header: &[String], row: &[String], column: &str) -> Result<f64, String> {
    cell(header, row, column)?.ok_or(format!("empty {column} in row {}", row[0]))
}

fn verdict(id: u8, title: &'static str, judged: Result<(bool, String), String>) -> Verdict {
    match judged {
        Ok((pass, detail)) => Verdict {
            id,
            title,
            pass,
            detail,
        },
        Err(detail) => Verdict {
            id,
            title,
            pass: false,
            detail,
        },
    }
}

fn train_metric(dir: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(dir.join("train_report.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v["clean_metric"]
        .as_f64()
        .ok_or("train report has no clean_metric".into())
}

pub fn zero_shift(run: &Run) -> Verdict {
    let judged = (|| {
        let (h, rows) = keyed(&run.classify.join("adapt_summary.csv"))?;
        let clean = rows.get("clean").ok_or("no clean row")?;
        let (src, act) = (num(&h, clean, "source")?, num(&h, clean, "actmad")?);
        let drift = num(&h, clean, "relative_drift")?;
        Ok((
            (act - src).abs() <= CLEAN_ACCURACY_SLACK && drift < MAX_CLEAN_DRIFT,
            format!(
                "clean accuracy source {src:.4} actmad {act:.4} (|diff| <= {CLEAN_ACCURACY_SLACK}); relative drift {drift:.3e} (< {MAX_CLEAN_DRIFT:e})"
            ),
        ))
    })();
    verdict(3, "zero-shift no-op", judged)
}

pub fn shift_recovery(run: &Run) -> Verdict {
    let judged = (|| {
        let clean = train_metric(&run.classify)?;
        let (h, rows) = keyed(&run.classify.join("adapt_summary.csv"))?;
        let corrupted: Vec<&Vec<String>> = rows.values().filter(|r| r[0] != "clean").collect();
        let (mut recovered, mut beats, mut dropped) = (0, 0, 0);
        let mut parts = Vec::new();
        for r in &corrupted {
            let (src, act) = (num(&h, r, "source")?, num(&h, r, "actmad")?);
            let frac = (act - src) / (clean - src);
            recovered += usize::from(frac >= MIN_RECOVERED);
            beats += usize::from(act > src);
            dropped += usize::from(clean - src >= MIN_DROP);
            parts.push(format!("{} {:.0}%", r[0], 100.0 * frac));
        }
        let pass = corrupted.len() == KINDS
            && clean >= MIN_SOURCE_CLEAN
            && dropped == KINDS
            && recovered >= MIN_KINDS_RECOVERED
            && beats == KINDS
            && run.classify_seconds < MAX_CLASSIFY_SECONDS;
        Ok((
            pass,
            format!(
                "clean {clean:.4}; {dropped}/{KINDS} drop >= {MIN_DROP}; {recovered}/{KINDS} recover >= {MIN_RECOVERED} (need {MIN_KINDS_RECOVERED}); beats source {beats}/{KINDS}; {:.0}s (< {MAX_CLASSIFY_SECONDS}s) [{}]",
                run.classify_seconds,
                parts.join(", ")
            ),
        ))
    })();
    verdict(4, "classification shift recovery", judged)
}

pub fn regression(run: &Run, entropy_refused: Result<String, String>) -> Verdict {
    let judged = (|| {
        let (h, rows) = keyed(&run.localize.join("adapt_summary.csv"))?;
        let corrupted: Vec<&Vec<String>> = rows.values().filter(|r| r[0] != "clean").collect();
        if corrupted.is_empty() {
            return Err("no corruption rows".to_string());
        }
        let mut src = 0.0;
        let mut act = 0.0;
        let mut entropy_cells = 0;
        for r in &corrupted {
            src += num(&h, r, "source")?;
            act += num(&h, r, "actmad")?;
            entropy_cells += usize::from(cell(&h, r, "entropy")?.is_some());
        }
        let n = corrupted.len() as f64;
        let reduction = 1.0 - act / src;
        let refusal = entropy_refused.clone()?;
        Ok((
            reduction >= MIN_MSE_REDUCTION && entropy_cells == 0,
            format!(
                "mean corrupted MSE source {:.5} actmad {:.5}: {:.1}% reduction (>= {:.0}%); entropy cells {entropy_cells}; {refusal}",
                src / n,
                act / n,
                100.0 * reduction,
                100.0 * MIN_MSE_REDUCTION
            ),
        ))
    })();
    verdict(5, "task-agnostic regression", judged)
}

fn ablation_metrics(dir: &Path) -> Result<BTreeMap<String, f64>, String> {
    let (h, rows) = keyed(&dir.join("ablation.csv"))?;
    rows.iter()
        .map(|(k, r)| Ok((k.clone(), num(&h, r, "metric")?)))
        .collect()
}

fn get(m: &BTreeMap<String, f64>, k: &str) -> Result<f64, String> {
    m.get(k).copied().ok_or(format!("no {k} row"))
}

pub fn ablation_order(run: &Run) -> Verdict {
    let judged = (|| {
        let cls = ablation_metrics(&run.ablation)?;
        let loc = ablation_metrics(&run.localize_ablation)?;
        let (cf, cl, cc) = (
            get(&cls, "full")?,
            get(&cls, "last_layer_only")?,
            get(&cls, "channel_averaged")?,
        );
        let (lf, ll, lc) = (
            get(&loc, "full")?,
            get(&loc, "last_layer_only")?,
            get(&loc, "channel_averaged")?,
        );
        // relative growth of the task error when locations are averaged away
        let cls_gap = ((1.0 - cc) - (1.0 - cf)) / (1.0 - cf);
        let loc_gap = (lc - lf) / lf;
        let pass = cf >= cl && cf >= cc && lf <= ll && lf <= lc && loc_gap > cls_gap;
        Ok((
            pass,
            format!(
                "accuracy full {cf:.4} last-layer {cl:.4} channel-avg {cc:.4}; MSE full {lf:.5} last-layer {ll:.5} channel-avg {lc:.5}; location gap localization {loc_gap:.3} vs classification {cls_gap:.3}"
            ),
        ))
    })();
    verdict(6, "ablation ordering", judged)
}

pub fn small_batches(run: &Run) -> Verdict {
    let judged = (|| {
        let (h, rows) = keyed(&run.ablation.join("ablation.csv"))?;
        let row = rows.get("batch_10").ok_or("no batch_10 row")?;
        let full = rows.get("full").ok_or("no full row")?;
        let (b10, src) = (
            num(&h, row, "metric")?,
            get(&ablation_metrics(&run.ablation)?, "source")?,
        );
        let lr10 = num(&h, row, "effective_lr")?;
        let lr_full = num(&h, full, "effective_lr")?;
        let bs_full: f64 = full[1].parse().map_err(|_| "bad batch size")?;
        let linear = (lr10 - lr_full * 10.0 / bs_full).abs() <= 1e-15 * lr_full;
        Ok((
            b10 > src && linear,
            format!("batch-10 accuracy {b10:.4} vs source {src:.4}; effective lr {lr10:.3e} (linear scaling {linear})"),
        ))
    })();
    verdict(7, "batch-size robustness", judged)
}

pub fn cycle_recovery(run: &Run) -> Verdict {
    let judged = (|| {
        let (sh, summary) =
            read_csv(&run.cycle.join("cycle_summary.csv")).map_err(|e| format!("{e:#}"))?;
        let (th, trace) =
            read_csv(&run.cycle.join("cycle_trace.csv")).map_err(|e| format!("{e:#}"))?;
        let first = summary.first().ok_or("empty summary")?;
        let last = summary.last().ok_or("empty summary")?;
        if first[1] != "clean" || last[1] != "clean" || summary.len() != 5 {
            return Err(format!(
                "schedule is not clean, 3 corruptions, clean: {summary:?}"
            ));
        }
        let (a, b) = (num(&sh, first, "actmad")?, num(&sh, last, "actmad")?);
        let seg = th
            .iter()
            .position(|c| c == "segment")
            .ok_or("no segment column")?;
        let tags: Vec<usize> = trace
            .iter()
            .map(|r| r[seg].parse().unwrap_or(usize::MAX))
            .collect();
        let ordered =
            tags.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1) && tags.last() == Some(&4);
        Ok((
            b >= a - CYCLE_SLACK && ordered,
            format!(
                "first clean {a:.4}, final clean {b:.4} (>= first - {CYCLE_SLACK}); trace {} batches over segments 0..=4",
                trace.len()
            ),
        ))
    })();
    verdict(8, "cycle recovery", judged)
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != TIMING_LOG) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

pub fn determinism(first: &Run, second: Result<Run, String>) -> Verdict {
    let judged = (|| {
        let second = second?;
        let a = files(&first.root);
        let b = files(&second.root);
        if a != b {
            return Err(format!("different file sets: {a:?} vs {b:?}"));
        }
        let differing: Vec<String> = a
            .iter()
            .filter(|rel| {
                fs::read(first.root.join(rel)).ok() != fs::read(second.root.join(rel)).ok()
            })
            .map(|rel| rel.display().to_string())
            .collect();
        Ok((
            differing.is_empty(),
            if differing.is_empty() {
                format!(
                    "{} result files byte-identical across two full runs",
                    a.len()
                )
            } else {
                format!("differ: {}", differing.join(", "))
            },
        ))
    })();
    verdict(10, "determinism", judged)
}
