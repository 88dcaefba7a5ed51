use crossformer_core::data::synth_dataset;
use crossformer_core::gradcheck::{jitter, model_grad_check, GradCheckOptions};
use crossformer_core::model::{build_variant, init_weights, Task, Variant};
use crossformer_core::train::{train_toy, TrainConfig};
use crossformer_core::{BackwardFault, Error};

fn toy4() -> crossformer_core::model::ModelSpec {
    let mut s = build_variant(Variant::Toy, Task::Classification);
    s.num_classes = 4;
    s
}

#[test]
fn full_toy_model_gradients() {
    let spec = toy4();
    let params = jitter(&init_weights::<f64>(&spec, 0).unwrap(), 1, 0.1);
    let data = synth_dataset::<f64>(0, 2, 64, 4).unwrap();
    let opts = GradCheckOptions {
        max_per_input: Some(3),
        ..GradCheckOptions::with_tol(1e-4)
    };
    let rep = model_grad_check(&spec, &params, &data.images, &data.labels, &opts).unwrap();
    assert!(rep.passed(), "{:?}", rep.worst_offenders(3));
    assert_eq!(rep.inputs.len(), params.len());
    let bad = GradCheckOptions {
        fault: Some(BackwardFault::MatMul),
        max_per_input: Some(1),
        ..opts
    };
    let rep = model_grad_check(&spec, &params, &data.images, &data.labels, &bad).unwrap();
    assert!(!rep.passed());
}

#[test]
fn first_loss_is_near_uniform_and_runs_are_reproducible() {
    let spec = toy4();
    let cfg = TrainConfig {
        steps: 3,
        ..TrainConfig::default()
    };
    let (_, a) = train_toy::<f64>(&spec, &cfg, |_| {}).unwrap();
    let (_, b) = train_toy::<f64>(&spec, &cfg, |_| {}).unwrap();
    let ln4 = 4f64.ln();
    assert!((a.log[0].loss - ln4).abs() <= 0.2 * ln4, "{}", a.log[0].loss);
    let bits = |r: &crossformer_core::train::TrainReport| r.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let (_, c) = train_toy::<f64>(&spec, &TrainConfig { seed: 1, ..cfg }, |_| {}).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn divergence_aborts() {
    let cfg = TrainConfig {
        steps: 20,
        lr: 1e200,
        warmup: 1,
        ..TrainConfig::default()
    };
    let err = train_toy::<f64>(&toy4(), &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

/// Softmax regression on raw pixels, trained on one draw and scored on a
/// fresh one.
fn linear_probe_accuracy(seed: u64) -> f64 {
    let train = synth_dataset::<f64>(seed, 256, 32, 4).unwrap();
    let test = synth_dataset::<f64>(seed + 100, 256, 32, 4).unwrap();
    let dim = 32 * 32 * 3;
    let mut w = vec![0.0f64; dim * 4];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..4).map(|k| x.iter().enumerate().map(|(i, v)| v * w[i * 4 + k]).sum()).collect()
    };
    for _epoch in 0..30 {
        for n in 0..train.len() {
            let x = &train.images.data()[n * dim..(n + 1) * dim];
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..4 {
                let g = e[k] / s - if train.labels[n] == k { 1.0 } else { 0.0 };
                for i in 0..dim {
                    w[i * 4 + k] -= 0.001 * g * x[i];
                }
            }
        }
    }
    let hits = (0..test.len())
        .filter(|&n| {
            let z = logits(&w, &test.images.data()[n * dim..(n + 1) * dim]);
            let best = (0..4).fold(0, |b, k| if z[k] > z[b] { k } else { b });
            best == test.labels[n]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn raw_pixels_are_not_linearly_separable() {
    let acc = linear_probe_accuracy(0);
    assert!(acc < 0.6, "linear probe reached {acc}");
}
