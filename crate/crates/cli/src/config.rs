//! Experiment configuration: one JSON document per run, with `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use actmad_core::adapt::AdaptConfig;
use actmad_core::data::{
    generate_dataset, Condition, CorruptionSpec, CycleSchedule, Split, SyntheticDataset, TaskKind,
};
use actmad_core::model::{Head, ModelConfig};
use actmad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

fn default_stats_batch() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_stats_batch")]
    pub batch_size: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            batch_size: default_stats_batch(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Source,
    Norm,
    Entropy,
}

fn default_baselines() -> Vec<Baseline> {
    vec![Baseline::Source, Baseline::Norm, Baseline::Entropy]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: TaskKind,
    /// Generator seed shared by the train and test splits.
    #[serde(default)]
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the per-segment stream order.
    #[serde(default)]
    pub stream_seed: u64,
    /// Also run the clean test stream through `adapt`, as its first row.
    #[serde(default)]
    pub clean_pass: bool,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
    #[serde(default)]
    pub cycle: Option<CycleSchedule>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<Baseline>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("results"),
        }
    }
}

fn default_cmd_order() -> u32 {
    3
}
fn default_sweep() -> Vec<usize> {
    vec![10, 16, 32, 64, 128]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Highest moment of the central-moment-difference variant.
    #[serde(default = "default_cmd_order")]
    pub cmd_order: u32,
    #[serde(default = "default_sweep")]
    pub batch_sizes: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            cmd_order: default_cmd_order(),
            batch_sizes: default_sweep(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

/// Applies `section.key=value` to a parsed document. The value is read as JSON
/// when it parses, otherwise as a bare string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Override(format!("`{assignment}` is not of the form key=value"))
    })?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Override(format!("empty key segment in `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            CliError::Override(format!("`{}` is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is nonempty")
}

impl ExperimentConfig {
    pub fn from_value(doc: Value) -> Result<Self, CliError> {
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: ".".into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let at = |path: &str, e: actmad_core::Error| CliError::Config {
            path: path.to_string(),
            message: e.to_string(),
        };
        let fail = |path: &str, message: String| {
            Err(CliError::Config {
                path: path.to_string(),
                message,
            })
        };
        self.model.validate().map_err(|e| at("model", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        self.adapt.validate().map_err(|e| at("adapt", e))?;
        let [h, w] = self.model.input_resolution;
        if h != w {
            return fail(
                "model.input_resolution",
                format!("images are square, got {h}x{w}"),
            );
        }
        let want = match self.data.task {
            TaskKind::Classification => Head::Classify,
            TaskKind::Localization => Head::Regress,
        };
        if self.model.head != want {
            return fail(
                "model.head",
                format!("a {} task needs the {want:?} head", self.data.task),
            );
        }
        if self.data.n_train < 2 || self.data.n_test < self.adapt.batch_size {
            return fail(
                "data",
                "n_train must be >= 2 and n_test at least one adaptation batch".to_string(),
            );
        }
        if self.stats.batch_size == 0 {
            return fail("stats.batch_size", "must be positive".to_string());
        }
        for (i, spec) in self.data.corruptions.iter().enumerate() {
            spec.validate()
                .map_err(|e| at(&format!("data.corruptions[{i}]"), e))?;
        }
        if let Some(cycle) = &self.data.cycle {
            cycle
                .validate(self.adapt.batch_size, self.data.n_test)
                .map_err(|e| at("data.cycle", e))?;
            for (i, seg) in cycle.segments.iter().enumerate() {
                if let Condition::Corrupted(spec) = &seg.condition {
                    spec.validate()
                        .map_err(|e| at(&format!("data.cycle.segments[{i}]"), e))?;
                }
            }
        }
        if !(2..=8).contains(&self.ablation.cmd_order) {
            return fail(
                "ablation.cmd_order",
                format!("must be in 2..=8, got {}", self.ablation.cmd_order),
            );
        }
        if self
            .ablation
            .batch_sizes
            .iter()
            .any(|&b| b < 2 || b > self.data.n_test)
        {
            return fail(
                "ablation.batch_sizes",
                "each size must be in 2..=n_test".to_string(),
            );
        }
        Ok(())
    }

    fn dataset(&self, split: Split, n: usize) -> actmad_core::Result<SyntheticDataset> {
        generate_dataset(
            self.data.task,
            self.data.seed,
            split,
            self.model.n_classes,
            n,
            self.model.input_resolution[0],
            self.model.in_channels,
        )
    }

    pub fn train_set(&self) -> actmad_core::Result<SyntheticDataset> {
        self.dataset(Split::Train, self.data.n_train)
    }

    pub fn test_set(&self) -> actmad_core::Result<SyntheticDataset> {
        self.dataset(Split::Test, self.data.n_test)
    }
}
