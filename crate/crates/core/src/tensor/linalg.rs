use alloc::vec;
use alloc::vec::Vec;

use super::{broadcast_shapes, broadcast_strides, for_each_offset2, numel, Tensor};
use crate::{Error, Real, Result};

/// `c[m,n] += a[m,k] * b[k,n]`. Every output element accumulates over `k` in
/// ascending order regardless of `m`, so row results do not depend on how many
/// rows are computed together.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Batch layout of a broadcast matmul: per-batch element offsets into `a`,
/// `b` and the output.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    pub batches: Vec<(usize, usize)>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shapes(a_batch, b_batch).ok_or_else(|| Error::shape("matmul", a, b))?;
    let mut out_shape = batch.clone();
    out_shape.extend_from_slice(&[m, n]);

    // A weight matrix applied to a stack of rows: fold the batch into m.
    if b_batch.is_empty() && !a_batch.is_empty() {
        let rows = numel(a_batch) * m;
        return Ok(MatmulPlan {
            m: rows,
            k,
            n,
            out_shape,
            batches: vec![(0, 0)],
        });
    }
    let sa: Vec<usize> = broadcast_strides(a_batch, &batch).iter().map(|s| s * m * k).collect();
    let sb: Vec<usize> = broadcast_strides(b_batch, &batch).iter().map(|s| s * k * n).collect();
    let mut batches = Vec::with_capacity(numel(&batch));
    for_each_offset2(&batch, &sa, &sb, |_, oa, ob| batches.push((oa, ob)));
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        batches,
    })
}

/// Batched matrix product over the trailing two axes; leading axes broadcast.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
        gemm_acc(
            &a.data()[oa..oa + m * k],
            &b.data()[ob..ob + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(&plan.out_shape, out)
}

/// Multiply-accumulate count of `matmul(a, b)`.
pub(crate) fn matmul_macs(plan: &MatmulPlan) -> u64 {
    (plan.batches.len() * plan.m * plan.k * plan.n) as u64
}
