//! Naive reference implementations shared by the integration tests and the
//! acceptance suite. Everything here is written with plain loops over
//! `f64` slices and shares no code with the library beyond tensor storage.
#![allow(dead_code)]

use crossformer_core::Tensor;

/// `x @ w + b` for one token.
pub fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>())
        .collect()
}

pub fn layer_norm(x: &[f64], gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gamma.data()[i] + beta.data()[i])
        .collect()
}

/// Group id and in-group `(row, col)` of grid position `(r, c)`.
pub fn assign(sda: bool, p: usize, r: usize, c: usize) -> ((usize, usize), (usize, usize)) {
    if sda {
        ((r / p, c / p), (r % p, c % p))
    } else {
        ((r % p, c % p), (r / p, c / p))
    }
}

/// Relative bias of key `(rk, ck)` for query `(rq, cq)` and head `h` from a
/// `[2T-1, 2T-1, heads]` table.
pub type BiasFn<'a> = dyn Fn(i64, i64, usize) -> f64 + 'a;

pub struct AttnWeights<'a> {
    pub q: (&'a Tensor<f64>, &'a Tensor<f64>),
    pub k: (&'a Tensor<f64>, &'a Tensor<f64>),
    pub v: (&'a Tensor<f64>, &'a Tensor<f64>),
    pub o: (&'a Tensor<f64>, &'a Tensor<f64>),
}

/// Full attention over all `h * w` tokens of `x` (`[h, w, d]` row-major)
/// where keys outside the query's group get zero weight and in-group pairs
/// get `bias(dx, dy, head)` with offsets in slot coordinates.
pub fn masked_full_attention(
    x: &[f64],
    (h, w, d): (usize, usize, usize),
    heads: usize,
    wts: &AttnWeights,
    sda: bool,
    p: usize,
    bias: Option<&BiasFn>,
) -> Vec<f64> {
    let n = h * w;
    let tok = |i: usize| &x[i * d..(i + 1) * d];
    let q: Vec<Vec<f64>> = (0..n).map(|i| affine(tok(i), wts.q.0, wts.q.1)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| affine(tok(i), wts.k.0, wts.k.1)).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| affine(tok(i), wts.v.0, wts.v.1)).collect();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let (gi, si) = assign(sda, p, i / w, i % w);
        let mut merged = vec![0.0; d];
        for hd in 0..heads {
            let lo = hd * dh;
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                let (gj, sj) = assign(sda, p, j / w, j % w);
                if gi != gj {
                    continue;
                }
                let mut s = 0.0;
                for c in lo..lo + dh {
                    s += q[i][c] * k[j][c];
                }
                s *= scale;
                if let Some(b) = bias {
                    s += b(si.0 as i64 - sj.0 as i64, si.1 as i64 - sj.1 as i64, hd);
                }
                logits[j] = s;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in lo..lo + dh {
                    merged[c] += e[j] / z * v[j][c];
                }
            }
        }
        out.extend(affine(&merged, wts.o.0, wts.o.1));
    }
    out
}

/// DPB MLP on one offset: tensors in the library's DPB order
/// (`proj`, then `ln1, fc1`, `ln2, fc2`, `ln3, fc3`).
pub fn dpb_scalar(t: &[Tensor<f64>], residual: bool, dx: f64, dy: f64) -> Vec<f64> {
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let mut hdn = affine(&[dx, dy], &t[0], &t[1]);
    for blk in 0..2 {
        let b = 2 + 4 * blk;
        let y = affine(&relu(layer_norm(&hdn, &t[b], &t[b + 1], 1e-5)), &t[b + 2], &t[b + 3]);
        hdn = if residual {
            hdn.iter().zip(&y).map(|(a, b)| a + b).collect()
        } else {
            y
        };
    }
    affine(&relu(layer_norm(&hdn, &t[10], &t[11], 1e-5)), &t[12], &t[13])
}

/// `QKᵀ` and `attn·V` multiply-accumulates of full attention over `n`
/// tokens of width `d`, counted loop by loop.
pub fn full_attention_loop_macs(n: usize, d: usize) -> u64 {
    let mut macs = 0u64;
    for _i in 0..n {
        for _j in 0..n {
            macs += 2 * d as u64;
        }
    }
    macs
}
