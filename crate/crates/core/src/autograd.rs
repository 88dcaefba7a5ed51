//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Values are immutable once recorded; gradients
//! are only produced by `backward`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{
    self, for_each_offset2, gemm_nt_acc, gemm_tn_acc, inverse_permutation, numel, strides,
    LayerNormStats, Tensor,
};
use crate::{Error, Real, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Softmax backward drops the `- sum(g * y)` term.
    Softmax,
    /// Matmul backward scales the right-operand gradient by 0.9.
    MatMul,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: LayerNormStats<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Gelu(Var),
    MeanAxes(Var, Vec<usize>),
    Sum(Var),
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatLast(Vec<Var>),
    AvgPool2d(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation counters accumulated while recording.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates executed by matmul and convolution.
    pub macs: u64,
    /// Rows pushed through a dynamic-position-bias MLP.
    pub dpb_evaluations: u64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    counters: Counters,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            counters: Counters::default(),
            fault: None,
        }
    }

    /// Installs a deliberately broken backward rule.
    pub fn with_fault(mut self, fault: Option<BackwardFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn macs(&self) -> u64 {
        self.counters.macs
    }

    pub(crate) fn count_dpb_rows(&mut self, rows: usize) {
        self.counters.dpb_evaluations += rows as u64;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = tensor::plan_matmul(self.shape(a), self.shape(b))?;
        self.counters.macs += tensor::matmul_macs(&p);
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(order)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, order.to_vec()), rg))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, stats) =
            tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = tensor::ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        self.counters.macs += geom.macs();
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = tensor::mean_axes(self.value(a), axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanAxes(a, axes.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Output slot `i` takes flattened input element `index[i]`, or zero.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).gather(&index, shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_last(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = tensor::avg_pool2d(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2d(x, r), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// `logits` is `[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, c] = *lv.shape() else {
            return Err(Error::shape("cross_entropy", &[labels.len(), 0], lv.shape()));
        };
        if b != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", &[labels.len(), c], lv.shape()));
        }
        let probs = tensor::softmax_lastdim(lv)?;
        let mut loss = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            let logits_row = &lv.data()[row * c..(row + 1) * c];
            let max = logits_row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = logits_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - logits_row[l];
        }
        loss /= T::from_f64(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.reduce_to(self.shape(a))?);
                }
                if self.wants(b) {
                    let gb = g.reduce_to(self.shape(b))?;
                    let gb = if matches!(node.op, Op::Sub(..)) { gb.map(|v| -v) } else { gb };
                    accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = g.zip_broadcast(self.value(b), |x, y| x * y)?;
                    accumulate(grads, a, ga.reduce_to(self.shape(a))?);
                }
                if self.wants(b) {
                    let gb = g.zip_broadcast(self.value(a), |x, y| x * y)?;
                    accumulate(grads, b, gb.reduce_to(self.shape(b))?);
                }
            }
            &Op::Scale(a, c) => accumulate(grads, a, g.map(|v| v * c)),
            &Op::MatMul(a, b) => self.matmul_backward(a, b, g, grads)?,
            &Op::Reshape(a) => accumulate(grads, a, g.reshape(self.shape(a))?),
            Op::Permute(a, order) => {
                accumulate(grads, *a, g.permute(&inverse_permutation(order))?)
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                if n > 0 {
                    let faulty = self.fault == Some(BackwardFault::Softmax);
                    for ((dr, yr), gr) in dx
                        .chunks_mut(n)
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot = if faulty {
                            T::zero()
                        } else {
                            yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>()
                        };
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                accumulate(grads, a, Tensor::new(y.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => self.layer_norm_backward(*x, *gamma, *beta, stats, g, grads)?,
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(x, w, b, stride, pad, g, grads)?,
            &Op::Relu(a) => {
                let x = self.value(a);
                let d = g.zip_broadcast(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                accumulate(grads, a, d);
            }
            &Op::Gelu(a) => {
                let d = g.zip_broadcast(self.value(a), |gv, xv| gv * tensor::gelu_grad(xv))?;
                accumulate(grads, a, d);
            }
            Op::MeanAxes(a, axes) => {
                let in_shape = self.shape(*a);
                let keep: Vec<usize> = (0..in_shape.len()).filter(|i| !axes.contains(i)).collect();
                let out_strides = strides(g.shape());
                let mut map = vec![0usize; in_shape.len()];
                for (j, &ax) in keep.iter().enumerate() {
                    map[ax] = out_strides[j];
                }
                let count = numel(in_shape) / g.len().max(1);
                let inv = T::one() / T::from_f64(count as f64);
                let mut d = vec![T::zero(); numel(in_shape)];
                for_each_offset2(in_shape, &strides(in_shape), &map, |_, i, o| {
                    d[i] = g.data()[o] * inv
                });
                accumulate(grads, *a, Tensor::new(in_shape, d)?);
            }
            &Op::Sum(a) => accumulate(grads, a, Tensor::full(self.shape(a), g.data()[0])),
            Op::Gather { x, index } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (gv, src) in g.data().iter().zip(index) {
                    if let Some(j) = *src {
                        d[j] += *gv;
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), d)?);
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap_or(&1);
                let rows = g.len() / total.max(1);
                let mut start = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap_or(&1);
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        accumulate(grads, p, Tensor::new(self.shape(p), d)?);
                    }
                    start += w;
                }
            }
            &Op::AvgPool2d(a, r) => {
                let [b, h, w, c] = *self.shape(a) else { unreachable!() };
                let (ho, wo) = (h.div_ceil(r), w.div_ceil(r));
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let (oy, ox) = (y / r, xx / r);
                            let cnt = ((oy * r + r).min(h) - oy * r) * ((ox * r + r).min(w) - ox * r);
                            let inv = T::one() / T::from_f64(cnt as f64);
                            let o = ((bi * ho + oy) * wo + ox) * c;
                            let i = ((bi * h + y) * w + xx) * c;
                            for ch in 0..c {
                                d[i + ch] = g.data()[o + ch] * inv;
                            }
                        }
                    }
                }
                accumulate(grads, a, Tensor::new(self.shape(a), d)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.shape()[1];
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::new(probs.shape(), d)?);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let p = tensor::plan_matmul(self.shape(a), self.shape(b))?;
        let (m, k, n) = (p.m, p.k, p.n);
        let (av, bv) = (self.value(a), self.value(b));
        if self.wants(a) {
            let mut da = vec![T::zero(); av.len()];
            for (bi, &(oa, ob)) in p.batches.iter().enumerate() {
                gemm_nt_acc(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &bv.data()[ob..ob + k * n],
                    &mut da[oa..oa + m * k],
                    m,
                    n,
                    k,
                );
            }
            accumulate(grads, a, Tensor::new(av.shape(), da)?);
        }
        if self.wants(b) {
            let mut db = vec![T::zero(); bv.len()];
            for (bi, &(oa, ob)) in p.batches.iter().enumerate() {
                gemm_tn_acc(
                    &av.data()[oa..oa + m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut db[ob..ob + k * n],
                    m,
                    k,
                    n,
                );
            }
            if self.fault == Some(BackwardFault::MatMul) {
                db.iter_mut().for_each(|v| *v *= T::from_f64(0.9));
            }
            accumulate(grads, b, Tensor::new(bv.shape(), db)?);
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &LayerNormStats<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let n = gam.len();
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgamma = vec![T::zero(); n];
        let mut dbeta = vec![T::zero(); n];
        let mut xhat = vec![T::zero(); n];
        let mut dxhat = vec![T::zero(); n];
        for (r, (xr, gr)) in xv.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for i in 0..n {
                xhat[i] = (xr[i] - mu) * rs;
                dxhat[i] = gr[i] * gam[i];
                s1 += dxhat[i];
                s2 += dxhat[i] * xhat[i];
                dgamma[i] += gr[i] * xhat[i];
                dbeta[i] += gr[i];
            }
            let (m1, m2) = (s1 * inv_n, s2 * inv_n);
            for i in 0..n {
                dx[r * n + i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
            }
        }
        if self.wants(x) {
            accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
        }
        if self.wants(gamma) {
            accumulate(grads, gamma, Tensor::new(&[n], dgamma)?);
        }
        if self.wants(beta) {
            accumulate(grads, beta, Tensor::new(&[n], dbeta)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = tensor::ConvGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        let rows = geom.ho * geom.wo;
        let patch = geom.patch();
        let cout = geom.cout;
        let mut col = vec![T::zero(); rows * patch];
        let mut dcol = vec![T::zero(); rows * patch];
        let mut dw = vec![T::zero(); wv.len()];
        let mut dx = vec![T::zero(); xv.len()];
        let mut dbias = vec![T::zero(); cout];
        for bi in 0..geom.batch {
            let gy = &g.data()[bi * rows * cout..(bi + 1) * rows * cout];
            if self.wants(w) {
                geom.im2col(xv.data(), bi, &mut col);
                gemm_tn_acc(&col, gy, &mut dw, rows, patch, cout);
            }
            if self.wants(x) {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                gemm_nt_acc(gy, wv.data(), &mut dcol, rows, cout, patch);
                geom.for_each_tap(bi, |dst, src, len| {
                    for t in 0..len {
                        dx[src + t] += dcol[dst + t];
                    }
                });
            }
            for r in gy.chunks(cout) {
                for (d, &v) in dbias.iter_mut().zip(r) {
                    *d += v;
                }
            }
        }
        if self.wants(w) {
            accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
        }
        if self.wants(x) {
            accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
        }
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            accumulate(grads, b, Tensor::new(&[cout], dbias)?);
        }
        Ok(())
    }
}
