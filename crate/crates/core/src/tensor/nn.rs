use alloc::vec;
use alloc::vec::Vec;

use super::{for_each_offset2, linalg::gemm_acc, numel, strides, Tensor};
use crate::{Error, Real, Result};

/// Softmax over the last axis with max subtraction. A row whose logits are all
/// `-inf` (every key masked) yields all zeros instead of NaN.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("softmax", &[1], &[]))?;
    let mut out = x.data().to_vec();
    if n == 0 {
        return Tensor::new(x.shape(), out);
    }
    for row in out.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape(), out)
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", &[1], &[]))?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape("layer_norm", &[n], gamma.shape()));
    }
    let rows = x.len() / n.max(1);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let inv_n = T::one() / T::from_f64(n as f64);
    let (g, b) = (gamma.data(), beta.data());
    for (r, row) in x.data().chunks(n).enumerate() {
        let mu = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
        let rs = T::one() / (var + eps).sqrt();
        let o = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            o[i] = (row[i] - mu) * rs * g[i] + b[i];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormStats { mean, rstd }))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_grad<T: Real>(v: T) -> T {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let du = c * (T::one() + T::from_f64(3.0) * a * v * v);
    half * (T::one() + t) + half * v * (T::one() - t * t) * du
}

/// Mean over `axes`, which are removed from the output shape.
pub fn mean_axes<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axes.iter().any(|&a| a >= rank) {
        return Err(Error::shape("mean_axes", x.shape(), axes));
    }
    let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| x.shape()[a]).collect();
    let out_strides = strides(&out_shape);
    let mut map = vec![0usize; rank];
    for (j, &a) in keep.iter().enumerate() {
        map[a] = out_strides[j];
    }
    let own = strides(x.shape());
    let mut out = vec![T::zero(); numel(&out_shape)];
    for_each_offset2(x.shape(), &own, &map, |_, i, o| out[o] += x.data()[i]);
    let count = x.len() / out.len().max(1);
    let inv = T::one() / T::from_f64(count as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&out_shape, out)
}

/// Output extent of a strided convolution, or an error when the kernel does
/// not fit inside the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("kernel and stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Config(alloc::format!(
            "kernel {kernel} larger than padded input {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, h, wd, cin) = match *x {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::shape("conv2d", &[0, 0, 0, 0], x)),
        };
        let (k, cout) = match *w {
            [k1, k2, c, o] if k1 == k2 && c == cin => (k1, o),
            _ => return Err(Error::shape("conv2d", &[0, 0, cin, 0], w)),
        };
        let ho = conv_out_extent(h, k, stride, pad)?;
        let wo = conv_out_extent(wd, k, stride, pad)?;
        Ok(ConvGeom {
            batch,
            h,
            w: wd,
            cin,
            k,
            cout,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.ho, self.wo, self.cout]
        } else {
            vec![self.batch, self.ho, self.wo, self.cout]
        }
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.ho * self.wo * self.patch() * self.cout) as u64
    }

    /// Visits every (output row, patch column, input offset) triple of image
    /// `b` whose input position lies inside the unpadded image.
    pub fn for_each_tap(&self, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        let img = b * self.h * self.w * self.cin;
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = oy * self.wo + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = img + (iy as usize * self.w + ix as usize) * self.cin;
                        let col = (ky * self.k + kx) * self.cin;
                        f(row * patch + col, src, self.cin);
                    }
                }
            }
        }
    }

    pub fn im2col<T: Real>(&self, x: &[T], b: usize, col: &mut [T]) {
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(b, |dst, src, n| col[dst..dst + n].copy_from_slice(&x[src..src + n]));
    }
}

/// Cross-correlation over `[B,] H, W, C` input with a `[k, k, C, C_out]`
/// kernel, symmetric zero padding and optional bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", &[g.cout], b.shape()));
        }
    }
    let rows = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * rows * g.cout];
    let mut col = vec![T::zero(); rows * g.patch()];
    for b in 0..g.batch {
        g.im2col(x.data(), b, &mut col);
        let o = &mut out[b * rows * g.cout..(b + 1) * rows * g.cout];
        if let Some(bias) = bias {
            for r in o.chunks_mut(g.cout) {
                r.copy_from_slice(bias.data());
            }
        }
        gemm_acc(&col, weight.data(), o, rows, g.patch(), g.cout);
    }
    Tensor::new(&g.out_shape(x.rank()), out)
}

/// Average pooling over `r x r` windows of a `B, H, W, C` tensor. Edge windows
/// that overhang the input average only their real cells.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = *x.shape() else {
        return Err(Error::shape("avg_pool2d", &[0, 0, 0, 0], x.shape()));
    };
    if r == 0 {
        return Err(Error::Config("pooling factor must be positive".into()));
    }
    let (ho, wo) = (h.div_ceil(r), w.div_ceil(r));
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y1, x1) = ((oy * r + r).min(h), (ox * r + r).min(w));
                let cnt = T::from_f64(((y1 - oy * r) * (x1 - ox * r)) as f64);
                let o = ((bi * ho + oy) * wo + ox) * c;
                for y in oy * r..y1 {
                    for xx in ox * r..x1 {
                        let i = ((bi * h + y) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data()[i + ch];
                        }
                    }
                }
                out[o..o + c].iter_mut().for_each(|v| *v /= cnt);
            }
        }
    }
    Tensor::new(&[b, ho, wo, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_and_masked() {
        let x = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let y = softmax_lastdim(&x).unwrap();
        for v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(y.data()[4], 0.0);
        assert!((y.data()[3] - 0.5).abs() < 1e-15);
        let all_masked = Tensor::<f64>::full(&[1, 2], f64::NEG_INFINITY);
        assert_eq!(softmax_lastdim(&all_masked).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_input_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 4], 3.5);
        let gamma = Tensor::full(&[4], 2.0);
        let beta = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert_eq!(&y.data()[..4], beta.data());
        assert_eq!(&y.data()[4..], beta.data());
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[5, 16], |_| rng.random_range(-4.0..9.0));
        let (y, _) = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-12).unwrap();
        for row in y.data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
        // already standardized input is left (nearly) unchanged
        let (z, _) = layer_norm(&y, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-12).unwrap();
        assert!(z.max_abs_diff(&y).unwrap() < 1e-9);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_pool_of_constant() {
        let x = Tensor::<f64>::full(&[2, 7, 7, 3], 1.25);
        let m = mean_axes(&x, &[1, 2]).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert!(m.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [h, wd, c] = *x.shape() else { panic!() };
        let [k, _, _, o] = *w.shape() else { panic!() };
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        Tensor::from_fn(&[ho, wo, o], |idx| {
            let (oy, ox, oc) = (idx / (wo * o), (idx / o) % wo, idx % o);
            let mut acc = b.data()[oc];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let ix = (ox * s + kx) as isize - p as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += x.at(&[iy as usize, ix as usize, ci]) * w.at(&[ky, kx, ci, oc]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, c, k, o, s, p) in &[(9, 7, 3, 3, 4, 2, 1), (8, 8, 2, 4, 3, 4, 0), (6, 10, 1, 5, 2, 1, 2)] {
            let x = Tensor::<f64>::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));
            let wt = Tensor::<f64>::from_fn(&[k, k, c, o], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::<f64>::from_fn(&[o], |_| rng.random_range(-1.0..1.0));
            let got = conv2d(&x, &wt, Some(&b), s, p).unwrap();
            let want = naive_conv(&x, &wt, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn conv_1x1_is_per_pixel_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_fn(&[4, 4, 3], |_| rng.random_range(-1.0..1.0));
        let wt = Tensor::<f64>::from_fn(&[1, 1, 3, 2], |_| rng.random_range(-1.0..1.0));
        let y = conv2d(&x, &wt, None, 1, 0).unwrap();
        let lin = super::super::matmul(&x.reshape(&[16, 3]).unwrap(), &wt.reshape(&[3, 2]).unwrap()).unwrap();
        assert_eq!(y.data(), lin.data());
    }

    #[test]
    fn conv_stage1_extent() {
        assert_eq!(conv_out_extent(224, 8, 4, 2).unwrap(), 56);
        assert_eq!(conv_out_extent(224, 32, 4, 14).unwrap(), 56);
        assert!(conv_out_extent(3, 8, 1, 2).is_err());
    }

    #[test]
    fn avg_pool_partial_windows() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 3, 1], |i| i as f64);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[2.0, 3.5, 6.5, 8.0]);
    }
}
