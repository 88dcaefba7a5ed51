//! Full-batch toy training on the synthetic dataset.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::data::{synth_dataset, Dataset};
use crate::init::rng;
use crate::model::{bind_params, model_forward_graph, Model, ModelSpec};
use crate::optim::{cosine_lr, AdamW};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub steps: usize,
    /// Samples per step; `0` means the whole dataset.
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Stop as soon as a step classifies its whole batch correctly.
    pub stop_at_full_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            samples: 32,
            classes: 4,
            steps: 500,
            batch: 0,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup: 10,
            weight_decay: 0.05,
            stop_at_full_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Accuracy of the step's forward pass on its batch.
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// First step whose batch was fully classified.
    pub full_accuracy_step: Option<usize>,
    /// Accuracy of the final weights over the whole dataset.
    pub final_accuracy: f64,
}

fn argmax_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy of `model` over all of `data`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    let out = model.forward(&data.images)?;
    Ok(argmax_accuracy(&out.logits, &data.labels))
}

/// Trains `spec` (with `num_classes` overridden by the config) from
/// `init_weights(seed)` on `synth_dataset(seed)`. `on_step` sees every log
/// entry as it is produced.
pub fn train_toy<T: Real>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Model<T>, TrainReport)> {
    let mut spec = spec.clone();
    spec.num_classes = cfg.classes;
    let (h, w) = spec.input_size;
    if h != w {
        return Err(Error::Config(format!("toy training needs a square input, got {h}x{w}")));
    }
    let data = synth_dataset::<T>(cfg.seed, cfg.samples, h, cfg.classes)?;
    let mut model = Model::<T>::new(spec, cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut drop_rng = rng(cfg.seed ^ 0x5eed);
    let batch = if cfg.batch == 0 { data.len() } else { cfg.batch.min(data.len()) };
    let mut log = Vec::with_capacity(cfg.steps);
    let mut full_accuracy_step = None;
    for step in 0..cfg.steps {
        let start = (step * batch) % data.len();
        let idx: Vec<usize> = (0..batch).map(|i| (start + i) % data.len()).collect();
        let (x, y) = data.batch(&idx)?;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &model.params, true);
        let xv = g.constant(x);
        let drop = (model.spec.drop_path > 0.0).then_some(&mut drop_rng);
        let out = model_forward_graph(&mut g, &model.spec, &vars, xv, drop)?;
        let loss = g.cross_entropy(out.logits, &y)?;
        let loss_value = g.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss_value} at step {step}")));
        }
        let accuracy = argmax_accuracy(g.value(out.logits), &y);
        let mut grads = g.backward(loss)?;
        let mut named: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, &v) in vars.iter() {
            if let Some(t) = grads.take(v) {
                named.insert(name.clone(), t);
            }
        }
        let lr = cosine_lr(cfg.lr, cfg.min_lr, step, cfg.warmup, cfg.steps);
        let entry = StepLog {
            step,
            loss: loss_value,
            accuracy,
            lr,
        };
        on_step(&entry);
        log.push(entry);
        if accuracy == 1.0 && full_accuracy_step.is_none() {
            full_accuracy_step = Some(step);
            if cfg.stop_at_full_accuracy {
                break;
            }
        }
        opt.step(&mut model.params, &named, lr)?;
    }
    let final_accuracy = evaluate(&model, &data)?;
    Ok((
        model,
        TrainReport {
            log,
            full_accuracy_step,
            final_accuracy,
        },
    ))
}
