//! Dense row-major tensors and the value-level kernels behind every graph op.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

mod linalg;
mod nn;

pub(crate) use linalg::{matmul_macs, plan_matmul};
pub(crate) use nn::ConvGeom;
pub use linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc, matmul};
pub use nn::{
    avg_pool2d, conv2d, conv_out_extent, gelu, gelu_grad, layer_norm, mean_axes, relu,
    softmax_lastdim, LayerNormStats,
};

/// A dense nd-array. `shape` may be empty for a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: core::fmt::Debug> core::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        const SHOWN: usize = 8;
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= SHOWN {
            d.field("data", &self.data);
        } else {
            d.field("data[..8]", &&self.data[..SHOWN]);
        }
        d.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed under the broadcast shape `out`:
/// broadcast (and missing leading) axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Walks every multi-index of `shape` in row-major order, calling `f` with the
/// offsets produced by each stride set.
pub(crate) fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let (len, la, lb) = (shape[last], sa[last], sb[last]);
    let mut linear = 0;
    loop {
        for j in 0..len {
            f(linear + j, oa + j * la, ob + j * lb);
        }
        linear += len;
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("Tensor::new", &[numel(shape)], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let st = strides(&self.shape);
        let off = index
            .iter()
            .zip(&self.shape)
            .zip(&st)
            .map(|((&i, &e), &s)| {
                assert!(i < e, "index {i} out of range for extent {e}");
                i * s
            })
            .sum::<usize>();
        self.data[off]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values, new row-major shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        if numel(new_shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, new_shape));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        validate_permutation(order, self.rank())?;
        let st = strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let src: Vec<usize> = order.iter().map(|&a| st[a]).collect();
        let zero = vec![0; order.len()];
        let mut data = vec![T::zero(); self.len()];
        for_each_offset2(&out_shape, &src, &zero, |o, i, _| data[o] = self.data[i]);
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out_shape = broadcast_shapes(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape("broadcast", &self.shape, &other.shape))?;
        if self.shape == other.shape {
            return Ok(Tensor {
                shape: out_shape,
                data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            });
        }
        let n = numel(&out_shape);
        if self.shape == out_shape && out_shape.ends_with(&other.shape) {
            let m = other.len().max(1);
            return Ok(Tensor {
                data: (0..n).map(|i| f(self.data[i], other.data[i % m])).collect(),
                shape: out_shape,
            });
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![T::zero(); n];
        for_each_offset2(&out_shape, &sa, &sb, |o, a, b| {
            data[o] = f(self.data[a], other.data[b])
        });
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sums a broadcast gradient back down to `target` shape.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        match broadcast_shapes(target, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(Error::shape("reduce_to", target, &self.shape)),
        }
        let mut out = vec![T::zero(); numel(target)];
        if self.shape.ends_with(target) {
            let m = out.len().max(1);
            for (i, &v) in self.data.iter().enumerate() {
                out[i % m] += v;
            }
        } else {
            let st = broadcast_strides(target, &self.shape);
            let own = strides(&self.shape);
            for_each_offset2(&self.shape, &own, &st, |_, s, t| out[t] += self.data[s]);
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data: out,
        })
    }

    /// Gathers `index[i]` of the flattened input into output slot `i`;
    /// `None` slots are zero.
    pub fn gather(&self, index: &[Option<usize>], out_shape: &[usize]) -> Result<Self> {
        if numel(out_shape) != index.len() {
            return Err(Error::shape("gather", out_shape, &[index.len()]));
        }
        let mut data = Vec::with_capacity(index.len());
        for src in index {
            data.push(match *src {
                Some(j) if j < self.len() => self.data[j],
                Some(j) => return Err(Error::shape("gather", &[self.len()], &[j])),
                None => T::zero(),
            });
        }
        Ok(Tensor {
            shape: out_shape.to_vec(),
            data,
        })
    }

    /// Concatenates along the last axis.
    pub fn concat_last(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape("concat_last", &first.shape, &p.shape));
            }
            widths.push(p.shape[p.rank() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn validate_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    let ok = order.len() == rank
        && order.iter().all(|&a| {
            if a >= rank || seen[a] {
                false
            } else {
                seen[a] = true;
                true
            }
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidPermutation {
            order: order.to_vec(),
            rank,
        })
    }
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn reshape_preserves_values() {
        let t = seq(&[6, 6, 8]);
        let r = t.reshape(&[4, 9, 8]).unwrap();
        assert_eq!(r.shape(), &[4, 9, 8]);
        assert_eq!(r.data(), t.data());
        assert_eq!(t.reshape(&[6, 6, 8]).unwrap(), t);
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let t = seq(&[2, 3]);
        assert!(matches!(t.reshape(&[7]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn permute_transposes_matrix() {
        let t = seq(&[2, 3]);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(p.permute(&[1, 0]).unwrap(), t);
    }

    #[test]
    fn permute_rank5_grouping_order() {
        // SDA grouping: (H/G, G, W/G, G, D) -> (H/G, W/G, G, G, D)
        let t = seq(&[2, 3, 2, 3, 4]);
        let p = t.permute(&[0, 2, 1, 3, 4]).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3, 3, 4]);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..3 {
                    for d in 0..3 {
                        for e in 0..4 {
                            assert_eq!(p.at(&[a, b, c, d, e]), t.at(&[a, c, b, d, e]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permute_rejects_non_permutations() {
        let t = seq(&[2, 3]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let a = seq(&[2, 3]);
        let b = Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.zip_broadcast(&b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let col = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let d = a.zip_broadcast(&col, |x, y| x * y).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 2.0, 6.0, 8.0, 10.0]);
        assert_eq!(d.reduce_to(&[2, 1]).unwrap().data(), &[3.0, 24.0]);
        assert_eq!(d.reduce_to(&[3]).unwrap().data(), &[6.0, 9.0, 12.0]);
        assert!(a.zip_broadcast(&seq(&[2]), |x, _| x).is_err());
    }

    #[test]
    fn gather_and_concat() {
        let t = seq(&[4]);
        let g = t.gather(&[Some(3), None, Some(0)], &[3]).unwrap();
        assert_eq!(g.data(), &[3.0, 0.0, 0.0]);
        let a = seq(&[2, 1]);
        let b = seq(&[2, 2]);
        let c = Tensor::concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 3.0]);
    }
}
