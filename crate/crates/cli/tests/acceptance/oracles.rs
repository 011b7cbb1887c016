//! Criterion 2: training statistics, the alignment loss and its moment form
//! against direct loop computations.

use actmad_core::adapt::{
    cmd_loss, total_alignment_loss, AdaptConfig, AlignmentReference, StatMode,
};
use actmad_core::data::{generate_classification_dataset, Split};
use actmad_core::model::{build_model, ModelConfig};
use actmad_core::stats::{compute_training_stats, LayerStats, StatsBundle};
use actmad_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const STATS_REL_TOL: f64 = 1e-10;
const LOSS_ABS_TOL: f64 = 1e-12;
const CMD_ABS_TOL: f64 = 1e-12;

/// Worst relative error of streamed statistics against a two-pass computation
/// over all samples, for several streaming batch sizes.
fn stats_error() -> f64 {
    let model = build_model(&ModelConfig {
        input_resolution: [16, 16],
        channels: vec![4, 6],
        blocks_per_stage: 1,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let ds = generate_classification_dataset(8, Split::Train, 4, 88, 16, 1).unwrap();
    let (_, taps) = model.forward_with_taps(&ds.images).unwrap();
    let mut worst: f64 = 0.0;
    for bs in [1, 7, 32, 88] {
        let bundle = compute_training_stats(&model, &ds, bs).unwrap();
        for (layer, tap) in bundle.layers.iter().zip(&taps) {
            let len = layer.mean.len();
            let rows: Vec<&[f64]> = tap.data().chunks(len).collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..len)
                .map(|e| rows.iter().map(|r| r[e]).sum::<f64>() / n)
                .collect();
            let var: Vec<f64> = (0..len)
                .map(|e| rows.iter().map(|r| (r[e] - mean[e]).powi(2)).sum::<f64>() / n)
                .collect();
            for (got, want) in [(&layer.mean, &mean), (&layer.var, &var)] {
                let scale = (want.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
                for (g, w) in got.iter().zip(want.iter()) {
                    worst = worst.max((g - w).abs() / w.abs().max(scale));
                }
            }
        }
    }
    worst
}

fn random_bundle(rng: &mut ChaCha8Rng, shapes: &[[usize; 3]]) -> StatsBundle {
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            let len = shape.iter().product();
            LayerStats {
                layer_id: format!("t{i}"),
                shape,
                mean: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: (0..len).map(|_| rng.random_range(0.0..2.0)).collect(),
                n_samples: 50,
            }
        })
        .collect();
    StatsBundle {
        model_fingerprint: 1,
        resolution: [shapes[0][1], shapes[0][2]],
        layers,
    }
}

fn loop_loss(tap: &Tensor, layer: &LayerStats) -> f64 {
    let n = tap.shape()[0];
    let len = layer.mean.len();
    let mut total = 0.0;
    for e in 0..len {
        let mut m = 0.0;
        for i in 0..n {
            m += tap.data()[i * len + e];
        }
        m /= n as f64;
        let mut v = 0.0;
        for i in 0..n {
            v += (tap.data()[i * len + e] - m).powi(2);
        }
        v /= n as f64;
        total += (m - layer.mean[e]).abs() + (v - layer.var[e]).abs();
    }
    total
}

/// (loss vs loop oracle, moment form vs mean/var form), worst absolute errors.
fn loss_errors() -> (f64, f64) {
    let shapes = [[3, 4, 4], [5, 2, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut loss_worst, mut cmd_worst) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let bundle = random_bundle(&mut rng, &shapes);
        let taps: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = 6 * s.iter().product::<usize>();
                Tensor::new(
                    vec![6, s[0], s[1], s[2]],
                    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let cfg = AdaptConfig::default();
        let reference = AlignmentReference::new(&bundle, None, &cfg).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = taps.iter().map(|t| tape.constant(t.clone())).collect();
        let (total, _) = total_alignment_loss(&mut tape, &vars, &reference, &cfg).unwrap();
        let oracle: f64 = taps
            .iter()
            .zip(&bundle.layers)
            .map(|(t, l)| loop_loss(t, l))
            .sum();
        loss_worst = loss_worst.max((tape.value(total).item().unwrap() - oracle).abs());

        for stat_mode in [StatMode::PerLocation, StatMode::ChannelAveraged] {
            let cfg = AdaptConfig {
                stat_mode,
                ..AdaptConfig::default()
            };
            let reference = AlignmentReference::new(&bundle, None, &cfg).unwrap();
            let (a, _) = total_alignment_loss(&mut tape, &vars, &reference, &cfg).unwrap();
            let b = cmd_loss(&mut tape, &vars, &reference, &cfg, 2).unwrap();
            cmd_worst = cmd_worst
                .max((tape.value(a).item().unwrap() - tape.value(b).item().unwrap()).abs());
        }
    }
    (loss_worst, cmd_worst)
}

pub fn criterion() -> Verdict {
    let stats = stats_error();
    let (loss, cmd) = loss_errors();
    Verdict {
        id: 2,
        title: "statistics and loss fidelity",
        pass: stats < STATS_REL_TOL && loss < LOSS_ABS_TOL && cmd < CMD_ABS_TOL,
        detail: format!(
            "streamed stats rel {stats:.2e} (< {STATS_REL_TOL:e}), loss abs {loss:.2e} (< {LOSS_ABS_TOL:e}), CMD(2) abs {cmd:.2e} (< {CMD_ABS_TOL:e})"
        ),
    }
}
