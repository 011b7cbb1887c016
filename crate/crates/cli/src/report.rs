//! Result files. CSV floats use 17 significant digits; wall-clock times go only
//! to the `timing.log` sidecar so every other file reruns byte-identically.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::Context;

use crate::CliError;

pub const TIMING_LOG: &str = "timing.log";

/// `x` with 17 significant digits, or an empty cell when absent.
pub fn float(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

pub fn parse_float(cell: &str) -> Option<f64> {
    (!cell.is_empty()).then(|| cell.parse().ok()).flatten()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Header and rows of a CSV file as strings.
pub fn read_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Output {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Output {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Appends wall-clock entries to `<dir>/timing.log`.
pub struct TimingLog {
    path: PathBuf,
    command: &'static str,
}

impl TimingLog {
    pub fn new(dir: &Path, command: &'static str) -> Self {
        Self {
            path: dir.join(TIMING_LOG),
            command,
        }
    }

    pub fn record(&self, label: &str, elapsed: Duration) -> anyhow::Result<()> {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::Output {
                path: self.path.clone(),
                source: e,
            })?;
        writeln!(
            f,
            "{stamp} {} {label} {:.3}s",
            self.command,
            elapsed.as_secs_f64()
        )?;
        Ok(())
    }
}
