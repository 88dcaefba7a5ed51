//! Cross-scale embedding layer: several square kernels share one stride, each
//! projects its patch to its own slice of channels, and the slices are
//! concatenated so every output site mixes patch scales around one center.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::init::{trunc_normal, WEIGHT_STD};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CelSpec {
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    /// Output channels of each kernel, parallel to `kernel_sizes`.
    pub dims: Vec<usize>,
}

/// Splits `total` channels over `n` kernels in ascending size order: kernel
/// `i` gets `total / 2^(i+1)` and the largest gets the remainder
/// `total / 2^(n-1)`, e.g. 128 over 4 kernels is `[64, 32, 16, 16]`.
pub fn allocate_dims(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("a cross-scale embedding needs at least one kernel".into()));
    }
    let div = 1usize << (n - 1);
    if total == 0 || total % div != 0 {
        return Err(Error::Config(format!(
            "embedding dim {total} cannot be split over {n} kernels (needs a multiple of {div})"
        )));
    }
    Ok((0..n)
        .map(|i| if i + 1 == n { total / div } else { total >> (i + 1) })
        .collect())
}

impl CelSpec {
    /// Kernels with the halving dimension allocation (smallest kernel gets the
    /// largest share).
    pub fn new(kernel_sizes: &[usize], stride: usize, total_dim: usize) -> Result<Self> {
        let alloc = allocate_dims(total_dim, kernel_sizes.len())?;
        let mut dims = alloc::vec![0; kernel_sizes.len()];
        for (rank, &i) in ascending(kernel_sizes).iter().enumerate() {
            dims[i] = alloc[rank];
        }
        let spec = CelSpec {
            kernel_sizes: kernel_sizes.to_vec(),
            stride,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dims(kernel_sizes: &[usize], stride: usize, dims: &[usize]) -> Result<Self> {
        let spec = CelSpec {
            kernel_sizes: kernel_sizes.to_vec(),
            stride,
            dims: dims.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernel_sizes.len() != self.dims.len() {
            return Err(Error::Config(format!(
                "cross-scale embedding has {} kernels but {} dims",
                self.kernel_sizes.len(),
                self.dims.len()
            )));
        }
        if self.stride == 0 || self.dims.contains(&0) {
            return Err(Error::Config("stride and per-kernel dims must be positive".into()));
        }
        for &k in &self.kernel_sizes {
            if k < self.stride || (k - self.stride) % 2 != 0 {
                return Err(Error::Config(format!(
                    "kernel {k} with stride {}: symmetric padding needs kernel >= stride and an even difference",
                    self.stride
                )));
            }
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Per-side zero padding of kernel `i`.
    pub fn padding(&self, i: usize) -> usize {
        (self.kernel_sizes[i] - self.stride) / 2
    }

    /// Kernel indices in concatenation (ascending size) order.
    pub fn concat_order(&self) -> Vec<usize> {
        ascending(&self.kernel_sizes)
    }

    /// Output grid for an `h x w` input.
    pub fn output_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the embedding stride {}",
                self.stride
            )));
        }
        Ok((h / self.stride, w / self.stride))
    }

    pub fn weight_shapes(&self, in_channels: usize) -> Vec<([usize; 4], usize)> {
        self.kernel_sizes
            .iter()
            .zip(&self.dims)
            .map(|(&k, &d)| ([k, k, in_channels, d], d))
            .collect()
    }
}

fn ascending(kernels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..kernels.len()).collect();
    idx.sort_by_key(|&i| (kernels[i], i));
    idx
}

/// One `(kernel, bias)` pair per entry of `CelSpec::kernel_sizes`.
#[derive(Debug, Clone)]
pub struct CelWeights<T> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> CelWeights<T> {
    pub fn init<R: rand::Rng + ?Sized>(spec: &CelSpec, in_channels: usize, rng: &mut R) -> Self {
        CelWeights {
            convs: spec
                .weight_shapes(in_channels)
                .into_iter()
                .map(|(ws, d)| (trunc_normal(rng, &ws, WEIGHT_STD), Tensor::zeros(&[d])))
                .collect(),
        }
    }
}

/// Records the embedding of `x` (`[B, H, W, C]`) on `g`.
pub fn cel_forward_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    spec: &CelSpec,
    convs: &[(Var, Var)],
) -> Result<Var> {
    spec.validate()?;
    if convs.len() != spec.kernel_sizes.len() {
        return Err(Error::Config(format!(
            "{} kernels but {} weight pairs",
            spec.kernel_sizes.len(),
            convs.len()
        )));
    }
    let shape = g.shape(x);
    let (h, w) = match *shape {
        [_, h, w, _] => (h, w),
        _ => return Err(Error::shape("cel", &[0, 0, 0, 0], shape)),
    };
    spec.output_grid(h, w)?;
    let mut parts = Vec::with_capacity(convs.len());
    for i in spec.concat_order() {
        let (wt, b) = convs[i];
        parts.push(g.conv2d(x, wt, Some(b), spec.stride, spec.padding(i))?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat_last(&parts)
}

/// Value-level embedding of one `H x W x C` image.
pub fn cel_forward<T: Real>(input: &Tensor<T>, spec: &CelSpec, weights: &CelWeights<T>) -> Result<Tensor<T>> {
    let [h, w, c] = *input.shape() else {
        return Err(Error::shape("cel", &[0, 0, 0], input.shape()));
    };
    let mut g = Graph::new();
    let x = g.constant(input.reshape(&[1, h, w, c])?);
    let convs: Vec<(Var, Var)> = weights
        .convs
        .iter()
        .map(|(wt, b)| (g.constant(wt.clone()), g.constant(b.clone())))
        .collect();
    let y = cel_forward_graph(&mut g, x, spec, &convs)?;
    let out = g.value(y);
    out.reshape(&out.shape()[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;
    use proptest::prelude::*;

    #[test]
    fn dimension_allocation() {
        assert_eq!(allocate_dims(128, 4).unwrap(), [64, 32, 16, 16]);
        assert_eq!(allocate_dims(96, 2).unwrap(), [48, 48]);
        assert_eq!(allocate_dims(96, 1).unwrap(), [96]);
        assert_eq!(allocate_dims(192, 3).unwrap(), [96, 48, 48]);
        assert!(allocate_dims(100, 4).is_err());
        assert!(allocate_dims(96, 0).is_err());
    }

    #[test]
    fn allocation_follows_kernel_size_not_position() {
        let spec = CelSpec::new(&[32, 4, 16, 8], 4, 128).unwrap();
        assert_eq!(spec.dims, [16, 64, 16, 32]);
    }

    #[test]
    fn config_errors() {
        assert!(CelSpec::new(&[5], 2, 8).is_err());
        assert!(CelSpec::new(&[2], 4, 8).is_err());
        let spec = CelSpec::new(&[2, 4], 2, 8).unwrap();
        assert!(spec.output_grid(7, 8).is_err());
    }

    #[test]
    fn stage1_shape() {
        let spec = CelSpec::new(&[4, 8, 16, 32], 4, 96).unwrap();
        let w = CelWeights::<f32>::init(&spec, 3, &mut rng(0));
        let x = Tensor::<f32>::full(&[224, 224, 3], 0.5);
        let y = cel_forward(&x, &spec, &w).unwrap();
        assert_eq!(y.shape(), &[56, 56, 96]);
    }

    #[test]
    fn stage2_shape() {
        let spec = CelSpec::new(&[2, 4], 2, 192).unwrap();
        let w = CelWeights::<f32>::init(&spec, 96, &mut rng(0));
        let x = Tensor::<f32>::full(&[56, 56, 96], 0.1);
        assert_eq!(cel_forward(&x, &spec, &w).unwrap().shape(), &[28, 28, 192]);
    }

    #[test]
    fn identity_single_kernel() {
        let spec = CelSpec::new(&[1], 1, 3).unwrap();
        let eye = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = CelWeights {
            convs: alloc::vec![(eye, Tensor::zeros(&[3]))],
        };
        let x = Tensor::<f64>::from_fn(&[4, 5, 3], |i| i as f64 * 0.25 - 3.0);
        assert_eq!(cel_forward(&x, &spec, &w).unwrap(), x);
    }

    #[test]
    fn zeroing_one_kernel_zeroes_its_slice() {
        let spec = CelSpec::new(&[2, 4, 8], 2, 16).unwrap();
        let mut w = CelWeights::<f64>::init(&spec, 2, &mut rng(3));
        let x = crate::init::uniform::<f64, _>(&mut rng(4), &[8, 8, 2], -1.0, 1.0);
        let full = cel_forward(&x, &spec, &w).unwrap();
        // kernel 4 is second in ascending order: channels 8..12
        w.convs[1].0.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let y = cel_forward(&x, &spec, &w).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(full.data()).enumerate() {
            let ch = i % 16;
            if (8..12).contains(&ch) {
                assert_eq!(a, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn all_kernels_produce_the_same_grid(
            stride in 1usize..4,
            extra in proptest::collection::vec(0usize..4, 1..4),
            hm in 1usize..6,
            wm in 1usize..6,
        ) {
            let kernels: Vec<usize> = extra.iter().map(|e| stride + 2 * e).collect();
            let (h, w) = (hm * stride + 2 * stride, wm * stride + 2 * stride);
            let dims = alloc::vec![1; kernels.len()];
            let spec = CelSpec::with_dims(&kernels, stride, &dims).unwrap();
            let grid = spec.output_grid(h, w).unwrap();
            for i in 0..kernels.len() {
                let p = spec.padding(i);
                let oh = crate::tensor::conv_out_extent(h, kernels[i], stride, p);
                let ow = crate::tensor::conv_out_extent(w, kernels[i], stride, p);
                if let (Ok(oh), Ok(ow)) = (oh, ow) {
                    prop_assert_eq!((oh, ow), grid);
                }
            }
        }
    }
}
