//! Procedural images whose class needs both a coarse and a fine feature.
//!
//! Each image shows one large shape (disk or square) at a random position,
//! filled with a fine texture (horizontal stripes, vertical stripes, checker
//! or diagonal stripes) of random phase and random colour, over noise. The
//! class is `shape + 2 * texture`. Random phase and colour sign make the mean
//! image of every class the same, so raw pixels carry no linear signal.

use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::init::rng;
use crate::{Error, Real, Result, Tensor};

/// Largest class count: two shapes times four textures.
pub const MAX_CLASSES: usize = 8;
const TEXTURE_PERIOD: usize = 4;

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// `[n, H, W, 3]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(&shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn texture(kind: usize, r: usize, c: usize, phase: (usize, usize)) -> f64 {
    let half = TEXTURE_PERIOD / 2;
    let (pr, pc) = ((r + phase.0) % TEXTURE_PERIOD, (c + phase.1) % TEXTURE_PERIOD);
    let on = match kind {
        0 => pr < half,
        1 => pc < half,
        2 => (pr < half) ^ (pc < half),
        _ => (r + c + phase.0) % TEXTURE_PERIOD < half,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

/// `n` balanced samples of `size x size` pixels.
pub fn synth_dataset<T: Real>(seed: u64, n: usize, size: usize, classes: usize) -> Result<Dataset<T>> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::Config(alloc::format!("classes must be in 1..={MAX_CLASSES}, got {classes}")));
    }
    if size < 8 {
        return Err(Error::Config(alloc::format!("image size {size} is too small")));
    }
    let mut r = rng(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(n * size * size * 3);
    let s = size as f64;
    for &label in &labels {
        let (shape, tex) = (label % 2, label / 2);
        let half = r.random_range(0.2..0.32) * s;
        let cy = r.random_range(half..s - half);
        let cx = r.random_range(half..s - half);
        let phase = (r.random_range(0..TEXTURE_PERIOD), r.random_range(0..TEXTURE_PERIOD));
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        let color: [f64; 3] = core::array::from_fn(|_| sign * r.random_range(0.5..1.0));
        for row in 0..size {
            for col in 0..size {
                let (dy, dx) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
                let inside = match shape {
                    0 => Float::sqrt(dy * dy + dx * dx) <= half,
                    _ => Float::abs(dy) <= half * 0.85 && Float::abs(dx) <= half * 0.85,
                };
                let t = if inside { texture(tex, row, col, phase) } else { 0.0 };
                for ch in color {
                    let noise: f64 = r.random_range(-0.1..0.1);
                    data.push(T::from_f64(t * ch + noise));
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(&[n, size, size, 3], data)?,
        labels,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset::<f64>(3, 30, 16, 4).unwrap();
        let b = synth_dataset::<f64>(3, 30, 16, 4).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_dataset::<f64>(4, 30, 16, 4).unwrap();
        assert_ne!(a.images, c.images);
        let counts: Vec<usize> = (0..4).map(|k| a.labels.iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn batch_slices_samples() {
        let d = synth_dataset::<f32>(0, 5, 8, 2).unwrap();
        let (x, y) = d.batch(&[4, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 8, 8, 3]);
        assert_eq!(y, [d.labels[4], d.labels[1]]);
        assert_eq!(x.data()[..192], d.images.data()[4 * 192..5 * 192]);
    }

    #[test]
    fn rejects_bad_class_counts() {
        assert!(synth_dataset::<f32>(0, 4, 16, 9).is_err());
        assert!(synth_dataset::<f32>(0, 4, 16, 0).is_err());
    }
}
