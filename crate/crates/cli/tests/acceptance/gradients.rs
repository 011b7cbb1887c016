//! Criterion 1: central differences against reverse mode for every tape op and
//! for the full alignment loss of a two-layer network.

use std::time::Instant;

use actmad_core::adapt::{total_alignment_loss, AdaptConfig, AlignmentReference};
use actmad_core::data::{generate_classification_dataset, Split};
use actmad_core::model::{build_model, GradScope, Head, Model, ModelConfig};
use actmad_core::stats::{batch_mean_var, LayerStats, StatsBundle};
use actmad_core::tensor::{NormMode, ParamKind, Pooling, Tape, Tensor, Var};
use actmad_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const REL_TOL: f64 = 1e-4;
const MAX_SECONDS: f64 = 60.0;
const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error over every input coordinate.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let analytic = grads.wrt(vars[i]).map_or(0.0, |g| g[j]);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            worst = worst.max(rel_err(
                analytic,
                (eval(&plus) - eval(&minus)) / (2.0 * STEP),
            ));
        }
    }
    worst
}

/// Scalar readout through a fixed random weighting.
fn squash(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random(&mut rng, tape.shape(v));
    let t = tape.constant(target);
    tape.mse(v, t)
}

fn op_checks() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let conv = [
        random(&mut rng, &[2, 2, 5, 5]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        out.push((
            format!("conv2d s{stride} p{pad}"),
            check(&conv, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                squash(t, y, 1)
            }),
        ));
    }
    let bn = [
        random(&mut rng, &[4, 3, 3, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
    ];
    for mode in [NormMode::Train, NormMode::Eval, NormMode::TestBatch] {
        out.push((
            format!("batch_norm2d {mode:?}"),
            check(&bn, |t, v| {
                let (mut rm, mut rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], &mut rm, &mut rv, mode, 0.1, 1e-5)?;
                squash(t, y, 2)
            }),
        ));
    }
    let x = random(&mut rng, &[4, 12]);
    out.push((
        "relu".into(),
        check(&[x.clone()], |t, v| {
            let y = t.relu(v[0])?;
            squash(t, y, 3)
        }),
    ));
    out.push((
        "sigmoid".into(),
        check(&[x.clone()], |t, v| {
            let y = t.sigmoid(v[0])?;
            squash(t, y, 4)
        }),
    ));
    let dense = [x, random(&mut rng, &[5, 12]), random(&mut rng, &[5])];
    out.push((
        "dense".into(),
        check(&dense, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            squash(t, y, 5)
        }),
    ));
    let img = random(&mut rng, &[2, 3, 4, 4]);
    out.push((
        "global_avg_pool".into(),
        check(&[img.clone()], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            squash(t, y, 6)
        }),
    ));
    out.push((
        "reshape/flatten/scale/affine/sum/add_all".into(),
        check(&[img.clone()], |t, v| {
            let y = t.reshape(v[0], vec![6, 16])?;
            let y = t.flatten(y)?;
            let y = t.scale(y, -1.3)?;
            let y = t.affine(y, 0.7, 0.2)?;
            let s = t.sum(y)?;
            let q = squash(t, y, 7)?;
            t.add_all(&[s, q])
        }),
    ));
    let logits = random(&mut rng, &[8, 4]);
    let labels: Vec<usize> = (0..8).map(|i| (i * 3) % 4).collect();
    out.push((
        "softmax_cross_entropy".into(),
        check(&[logits.clone()], |t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        }),
    ));
    out.push((
        "softmax_entropy".into(),
        check(&[logits], |t, v| t.softmax_entropy(v[0])),
    ));
    let (a, b) = (random(&mut rng, &[3, 10]), random(&mut rng, &[3, 10]));
    out.push((
        "mse".into(),
        check(&[a.clone(), b.clone()], |t, v| t.mse(v[0], v[1])),
    ));
    out.push((
        "l1_distance".into(),
        check(&[a, b], |t, v| t.l1_distance(v[0], v[1])),
    ));
    let m = random(&mut rng, &[5, 2, 2, 3]);
    for order in 1..=4 {
        for pooling in [Pooling::Batch, Pooling::BatchSpatial] {
            out.push((
                format!("moment k={order} {pooling:?}"),
                check(&[m.clone()], |t, v| {
                    let y = t.moment(v[0], order, pooling)?;
                    squash(t, y, 8)
                }),
            ));
        }
    }
    out
}

/// Reference statistics far enough from the batch statistics that no L1 term
/// sits near its kink.
fn displaced_reference(model: &Model, images: &Tensor) -> StatsBundle {
    let (_, taps) = model.forward_with_taps(images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layers = taps
        .iter()
        .zip(model.tap_points())
        .map(|(t, p)| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let (m, var) = batch_mean_var(&mut tape, v).unwrap();
            let mean = tape.value(m).data().iter().map(|x| {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                x + s * rng.random_range(0.3..1.0)
            });
            let mean: Vec<f64> = mean.collect();
            let var = tape
                .value(var)
                .data()
                .iter()
                .map(|x| {
                    if rng.random_bool(0.5) {
                        x * 2.5 + 0.3
                    } else {
                        x * 0.3
                    }
                })
                .collect();
            LayerStats {
                layer_id: p.layer_id.clone(),
                shape: p.expected_shape,
                mean,
                var,
                n_samples: 10,
            }
        })
        .collect();
    StatsBundle {
        model_fingerprint: 1,
        resolution: [8, 8],
        layers,
    }
}

fn full_loss_check() -> (usize, f64) {
    let model = build_model(&ModelConfig {
        input_resolution: [8, 8],
        channels: vec![2, 3],
        blocks_per_stage: 1,
        head: Head::Classify,
        n_classes: 3,
        seed: 21,
        ..ModelConfig::default()
    })
    .unwrap();
    let images = generate_classification_dataset(5, Split::Test, 3, 6, 8, 1)
        .unwrap()
        .images;
    let bundle = displaced_reference(&model, &images);
    let cfg = AdaptConfig::default();
    let reference = AlignmentReference::new(&bundle, None, &cfg).unwrap();
    let loss_of = |m: &Model| {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = m
            .forward(&mut tape, x, NormMode::Eval, &GradScope::None)
            .unwrap();
        let (loss, _) = total_alignment_loss(&mut tape, &pass.taps, &reference, &cfg).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut analytic = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = analytic
        .forward(&mut tape, x, NormMode::Eval, &GradScope::All)
        .unwrap();
    let (loss, _) = total_alignment_loss(&mut tape, &pass.taps, &reference, &cfg).unwrap();
    tape.backward(loss)
        .unwrap()
        .accumulate_into(&mut analytic.params)
        .unwrap();
    let h = 1e-6;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (pi, p) in analytic.params.iter().enumerate() {
        // the head lies downstream of every tap
        if matches!(p.kind, ParamKind::DenseWeight | ParamKind::DenseBias) {
            continue;
        }
        let grad = p.tensor.grad().unwrap();
        for j in 0..p.tensor.len() {
            let mut plus = model.clone();
            plus.params[pi].tensor.data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params[pi].tensor.data_mut()[j] -= h;
            worst = worst.max(rel_err(
                grad[j],
                (loss_of(&plus) - loss_of(&minus)) / (2.0 * h),
            ));
            checked += 1;
        }
    }
    (checked, worst)
}

pub fn criterion() -> Verdict {
    let clock = Instant::now();
    let ops = op_checks();
    let (coords, full) = full_loss_check();
    let seconds = clock.elapsed().as_secs_f64();
    let (worst_op, worst) = ops
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    Verdict {
        id: 1,
        title: "gradient correctness",
        pass: worst < REL_TOL && full < REL_TOL && seconds < MAX_SECONDS,
        detail: format!(
            "{} op checks, worst {worst:.2e} ({worst_op}); full loss {full:.2e} over {coords} params; {seconds:.1}s (limits {REL_TOL:e}, {MAX_SECONDS}s)",
            ops.len()
        ),
    }
}
