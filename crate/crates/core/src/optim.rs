//! AdamW with a warmup + cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;

use num_traits::Float;

use crate::model::ParamStore;
use crate::{Real, Result, Tensor};

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

/// Weight matrices and kernels decay; biases, norm parameters, position
/// tables and embeddings do not.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !name.ends_with("rpb_table") && name != "ape"
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Float::powi(self.beta1, t);
        let c2 = 1.0 - Float::powi(self.beta2, t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(crate::Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let decay = if decays(name, p.shape()) {
                T::from_f64(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let step = T::from_f64(lr / c1);
            let inv_c2 = T::from_f64(1.0 / c2);
            let eps = T::from_f64(self.eps);
            let pd = p.data_mut().iter_mut();
            for (((pi, &gi), mi), vi) in pd.zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi *= decay;
                *pi -= step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to
/// `min_lr` at `total`.
pub fn cosine_lr(base: f64, min_lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + Float::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0.0, 0, 4, 100) - 0.25).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.0, 3, 4, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 100, 4, 100) - 0.1).abs() < 1e-12);
        let mid = cosine_lr(1.0, 0.0, 52, 4, 100);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut p = ParamStore::new();
        p.insert("w.bias", Tensor::new(&[2], alloc::vec![1.0f64, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w.bias".into(), Tensor::new(&[2], alloc::vec![0.3, -5.0]).unwrap());
        let mut opt = AdamW::new(0.5);
        opt.step(&mut p, &g, 0.1).unwrap();
        let d = p.get("w.bias").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_matrices() {
        assert!(decays("stage0.block0.attn.q.weight", &[8, 8]));
        assert!(!decays("stage0.block0.attn.q.bias", &[8]));
        assert!(!decays("stage0.block0.attn.rpb_table", &[3, 3, 2]));
        assert!(!decays("ape", &[4, 4, 8]));
    }
}
