//! Fixtures shared by the benchmarks: a trained-shape model, a test batch and
//! the matching alignment reference.

use actmad_core::adapt::{AdaptConfig, AlignmentReference};
use actmad_core::data::{generate_classification_dataset, Split, SyntheticDataset};
use actmad_core::model::{build_model, Model, ModelConfig};
use actmad_core::stats::compute_training_stats;

pub const RESOLUTION: usize = 32;

/// The model shape used by the shipped experiment configs.
pub fn model() -> Model {
    build_model(&ModelConfig {
        input_resolution: [RESOLUTION, RESOLUTION],
        in_channels: 1,
        channels: vec![8, 16, 32],
        blocks_per_stage: 2,
        n_classes: 4,
        ..ModelConfig::default()
    })
    .expect("valid model config")
}

pub fn dataset(split: Split, n: usize) -> SyntheticDataset {
    generate_classification_dataset(1, split, 4, n, RESOLUTION, 1).expect("valid dataset")
}

pub struct Fixture {
    pub model: Model,
    pub train: SyntheticDataset,
    pub test: SyntheticDataset,
    pub reference: AlignmentReference,
    pub cfg: AdaptConfig,
}

pub fn fixture(batch_size: usize) -> Fixture {
    let model = model();
    let train = dataset(Split::Train, 256);
    let test = dataset(Split::Test, batch_size);
    let bundle = compute_training_stats(&model, &train, 64).expect("stats");
    let cfg = AdaptConfig {
        batch_size,
        ..AdaptConfig::default()
    };
    let reference = AlignmentReference::new(&bundle, None, &cfg).expect("reference");
    Fixture {
        model,
        train,
        test,
        reference,
        cfg,
    }
}
