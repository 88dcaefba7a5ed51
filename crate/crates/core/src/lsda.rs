//! Long/short distance attention.
//!
//! Short distance attention (SDA) groups every `G x G` block of adjacent
//! embeddings; long distance attention (LDA) groups embeddings sampled every
//! `I` positions. Either way the grid is rearranged into groups with
//! reshape/permute only, vanilla multi-head attention runs inside each group,
//! and the inverse rearrangement restores the grid. Grids that are not a
//! multiple of the group pattern are zero-padded and the padded keys masked.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::dpb::BiasProvider;
use crate::init::{trunc_normal, WEIGHT_STD};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupMode {
    /// Adjacent `G x G` windows.
    Sda,
    /// Interval-`I` sampling.
    Lda,
}

/// Index map from an `H x W` grid to `(group, slot)` coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub mode: GroupMode,
    pub grid: (usize, usize),
    /// Group size `G` for SDA, interval `I` for LDA.
    pub param: usize,
    pub padded: (usize, usize),
    /// Number of groups along each axis.
    pub groups: (usize, usize),
    /// Slot extent of one group along each axis.
    pub extent: (usize, usize),
    /// `true` for slots holding a real grid position, group-major.
    pub mask: Vec<bool>,
    /// Grid position `r * W + c` to `(group, slot)`.
    pub forward_index: Vec<(usize, usize)>,
    /// `(group * slots + slot)` to grid position, `None` for padding.
    pub inverse_index: Vec<Option<usize>>,
}

impl GroupLayout {
    pub fn new(mode: GroupMode, h: usize, w: usize, param: usize) -> Result<Self> {
        if h == 0 || w == 0 || param == 0 {
            return Err(Error::Config(format!(
                "grid {h}x{w} with group parameter {param}: all must be positive"
            )));
        }
        let padded = (h.div_ceil(param) * param, w.div_ceil(param) * param);
        let (groups, extent) = match mode {
            GroupMode::Sda => ((padded.0 / param, padded.1 / param), (param, param)),
            GroupMode::Lda => ((param, param), (padded.0 / param, padded.1 / param)),
        };
        let slots = extent.0 * extent.1;
        let n_groups = groups.0 * groups.1;
        let mut mask = vec![false; n_groups * slots];
        let mut inverse_index = vec![None; n_groups * slots];
        let mut forward_index = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (grp, slot) = match mode {
                    GroupMode::Sda => (
                        (r / param) * groups.1 + c / param,
                        (r % param) * extent.1 + c % param,
                    ),
                    GroupMode::Lda => (
                        (r % param) * groups.1 + c % param,
                        (r / param) * extent.1 + c / param,
                    ),
                };
                forward_index.push((grp, slot));
                mask[grp * slots + slot] = true;
                inverse_index[grp * slots + slot] = Some(r * w + c);
            }
        }
        Ok(GroupLayout {
            mode,
            grid: (h, w),
            param,
            padded,
            groups,
            extent,
            mask,
            forward_index,
            inverse_index,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.0 * self.groups.1
    }

    pub fn slots(&self) -> usize {
        self.extent.0 * self.extent.1
    }

    /// Side of the square bias table that covers every in-group offset.
    pub fn bias_extent(&self) -> usize {
        self.extent.0.max(self.extent.1)
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    pub fn padded_slots(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Row/column of a slot inside its group.
    pub fn slot_coords(&self, slot: usize) -> (usize, usize) {
        (slot / self.extent.1, slot % self.extent.1)
    }

    /// Additive key mask `[groups, 1, 1, slots]`: 0 for real keys, `-inf`
    /// for padding.
    pub fn key_mask<T: Real>(&self) -> Tensor<T> {
        let slots = self.slots();
        Tensor::from_fn(&[self.n_groups(), 1, 1, slots], |i| {
            if self.mask[i] {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }

    fn reshape_split(&self, batch: usize, d: usize) -> [usize; 6] {
        let (gh, gw) = self.extent;
        let (pr, pc) = (self.padded.0 / gh, self.padded.1 / gw);
        match self.mode {
            // (H'/G, G, W'/G, G)
            GroupMode::Sda => [batch, pr, gh, pc, gw, d],
            // (H'/I, I, W'/I, I): row = slot_r * I + residue
            GroupMode::Lda => [batch, gh, pr, gw, pc, d],
        }
    }

    fn group_order(&self) -> [usize; 6] {
        match self.mode {
            GroupMode::Sda => [0, 1, 3, 2, 4, 5],
            GroupMode::Lda => [0, 2, 4, 1, 3, 5],
        }
    }
}

/// Alias matching the operation name used throughout the crate.
pub fn build_layout(mode: GroupMode, h: usize, w: usize, param: usize) -> Result<GroupLayout> {
    GroupLayout::new(mode, h, w, param)
}

fn pad_index(b: usize, (h, w): (usize, usize), (ph, pw): (usize, usize), d: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(b * ph * pw * d);
    for bi in 0..b {
        for r in 0..ph {
            for c in 0..pw {
                for k in 0..d {
                    idx.push((r < h && c < w).then(|| ((bi * h + r) * w + c) * d + k));
                }
            }
        }
    }
    idx
}

fn crop_index(b: usize, (h, w): (usize, usize), (ph, pw): (usize, usize), d: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                for k in 0..d {
                    idx.push(Some(((bi * ph + r) * pw + c) * d + k));
                }
            }
        }
    }
    idx
}

fn grid_dims(g: &Graph<impl Real>, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, h, w, d] => Ok([b, h, w, d]),
        ref s => Err(Error::shape("lsda", &[0, 0, 0, 0], s)),
    }
}

/// `[B, H, W, D]` grid to `[B, groups, slots, D]`.
pub fn group_graph<T: Real>(g: &mut Graph<T>, x: Var, layout: &GroupLayout) -> Result<Var> {
    let [b, h, w, d] = grid_dims(g, x)?;
    if (h, w) != layout.grid {
        return Err(Error::shape("group", &[layout.grid.0, layout.grid.1], &[h, w]));
    }
    let mut x = x;
    if layout.is_padded() {
        let (ph, pw) = layout.padded;
        x = g.gather(x, pad_index(b, (h, w), layout.padded, d), &[b, ph, pw, d])?;
    }
    let x = g.reshape(x, &layout.reshape_split(b, d))?;
    let x = g.permute(x, &layout.group_order())?;
    g.reshape(x, &[b, layout.n_groups(), layout.slots(), d])
}

/// Inverse of [`group_graph`]; padded slots are dropped.
pub fn ungroup_graph<T: Real>(g: &mut Graph<T>, x: Var, layout: &GroupLayout) -> Result<Var> {
    let (b, d) = match *g.shape(x) {
        [b, n, s, d] if n == layout.n_groups() && s == layout.slots() => (b, d),
        ref s => {
            return Err(Error::shape(
                "ungroup",
                &[0, layout.n_groups(), layout.slots(), 0],
                s,
            ))
        }
    };
    let split = layout.reshape_split(b, d);
    let order = layout.group_order();
    let grouped: Vec<usize> = order.iter().map(|&a| split[a]).collect();
    let x = g.reshape(x, &grouped)?;
    let x = g.permute(x, &crate::tensor::inverse_permutation(&order))?;
    let (ph, pw) = layout.padded;
    let x = g.reshape(x, &[b, ph, pw, d])?;
    if !layout.is_padded() {
        return Ok(x);
    }
    let (h, w) = layout.grid;
    g.gather(x, crop_index(b, layout.grid, layout.padded, d), &[b, h, w, d])
}

fn batched<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.reshape(&s)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(Error::shape("lsda", &[0, 0, 0], x.shape())),
    }
}

fn unbatch<T: Real>(x: &Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        x.reshape(&x.shape()[1..])
    } else {
        Ok(x.clone())
    }
}

/// Value-level grouping of an `H x W x D` (or batched) grid.
pub fn group<T: Real>(x: &Tensor<T>, layout: &GroupLayout) -> Result<Tensor<T>> {
    let (xb, squeeze) = batched(x)?;
    let mut g = Graph::new();
    let v = g.constant(xb);
    let out = group_graph(&mut g, v, layout)?;
    unbatch(g.value(out), squeeze)
}

/// Value-level inverse of [`group`].
pub fn ungroup<T: Real>(x: &Tensor<T>, layout: &GroupLayout) -> Result<Tensor<T>> {
    let (xb, squeeze) = match x.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            (x.reshape(&s)?, true)
        }
        _ => (x.clone(), false),
    };
    let mut g = Graph::new();
    let v = g.constant(xb);
    let out = ungroup_graph(&mut g, v, layout)?;
    unbatch(g.value(out), squeeze)
}

/// Weights of one multi-head attention: `[D, D]` projections and `[D]`
/// biases for query, key, value and output.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T> {
    pub q: (Tensor<T>, Tensor<T>),
    pub k: (Tensor<T>, Tensor<T>),
    pub v: (Tensor<T>, Tensor<T>),
    pub o: (Tensor<T>, Tensor<T>),
}

impl<T: Real> AttentionWeights<T> {
    pub fn init<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut lin = || (trunc_normal(rng, &[dim, dim], WEIGHT_STD), Tensor::zeros(&[dim]));
        AttentionWeights {
            q: lin(),
            k: lin(),
            v: lin(),
            o: lin(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AttentionVars {
        let mut c = |p: &(Tensor<T>, Tensor<T>)| (g.constant(p.0.clone()), g.constant(p.1.clone()));
        AttentionVars {
            q: c(&self.q),
            k: c(&self.k),
            v: c(&self.v),
            o: c(&self.o),
        }
    }
}

/// Graph handles of [`AttentionWeights`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

/// `[.., N, D]` to `[.., heads, N, d]`, or `[.., heads, d, N]` when
/// `transposed`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize, transposed: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = s.len();
    let (n, d) = (s[r - 2], s[r - 1]);
    let mut split = s[..r - 2].to_vec();
    split.extend_from_slice(&[n, heads, d / heads]);
    let x = g.reshape(x, &split)?;
    let mut order: Vec<usize> = (0..r - 2).collect();
    if transposed {
        order.extend_from_slice(&[r - 1, r, r - 2]);
    } else {
        order.extend_from_slice(&[r - 1, r - 2, r]);
    }
    g.permute(x, &order)
}

fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = s.len();
    let (h, n, d) = (s[r - 3], s[r - 2], s[r - 1]);
    let mut order: Vec<usize> = (0..r - 3).collect();
    order.extend_from_slice(&[r - 2, r - 3, r - 1]);
    let x = g.permute(x, &order)?;
    let mut merged = s[..r - 3].to_vec();
    merged.extend_from_slice(&[n, h * d]);
    g.reshape(x, &merged)
}

/// `softmax(q kᵀ + bias + mask) v` on head-split operands: `q` is
/// `[.., h, N, d]` (already scaled), `k_t` is `[.., h, d, M]`, `v` is
/// `[.., h, M, d]`. Only the two matmuls cost multiply-accumulates.
pub fn attention_core<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k_t: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let mut logits = g.matmul(q, k_t)?;
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let attn = g.softmax_lastdim(logits)?;
    g.matmul(attn, v)
}

/// Multi-head attention inside each group of `x` (`[B, groups, N, D]`).
/// `bias` is `[heads, N, N]`; `mask` is an additive `[groups, 1, 1, N]` key
/// mask.
pub fn grouped_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    attn: &AttentionVars,
    heads: usize,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let d_model = *g.shape(x).last().unwrap_or(&0);
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {d_model} is not divisible by {heads} heads"
        )));
    }
    let scale = T::one() / T::from_f64((d_model / heads) as f64).sqrt();
    let q = g.linear(x, attn.q.0, Some(attn.q.1))?;
    let k = g.linear(x, attn.k.0, Some(attn.k.1))?;
    let v = g.linear(x, attn.v.0, Some(attn.v.1))?;
    let q = split_heads(g, q, heads, false)?;
    let q = g.scale(q, scale);
    let k_t = split_heads(g, k, heads, true)?;
    let v = split_heads(g, v, heads, false)?;
    let out = attention_core(g, q, k_t, v, bias, mask)?;
    let out = merge_heads(g, out)?;
    g.linear(out, attn.o.0, Some(attn.o.1))
}

/// Group, attend within groups, ungroup. `x` is `[B, H, W, D]`; `bias` is the
/// `[heads, N, N]` matrix for this layout.
pub fn lsda_forward_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &GroupLayout,
    attn: &AttentionVars,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let grouped = group_graph(g, x, layout)?;
    let mask = layout.is_padded().then(|| g.constant(layout.key_mask()));
    let out = grouped_attention(g, grouped, attn, heads, bias, mask)?;
    ungroup_graph(g, out, layout)
}

/// Value-level LSDA on an `H x W x D` (or batched) grid.
pub fn lsda_forward<T: Real>(
    x: &Tensor<T>,
    mode: GroupMode,
    group_or_interval: usize,
    weights: &AttentionWeights<T>,
    heads: usize,
    bias: &BiasProvider<T>,
) -> Result<Tensor<T>> {
    let (xb, squeeze) = batched(x)?;
    let [_, h, w, _] = *xb.shape() else { unreachable!() };
    let layout = GroupLayout::new(mode, h, w, group_or_interval)?;
    let mut g = Graph::new();
    let xv = g.constant(xb);
    let vars = weights.bind(&mut g);
    let b = bias.bias_graph(&mut g, &layout)?;
    let out = lsda_forward_graph(&mut g, xv, &layout, &vars, heads, b)?;
    unbatch(g.value(out), squeeze)
}

/// Key/value spatial-reduction attention over the whole grid (the PVT-style
/// ablation): queries from every position, keys and values from an
/// `r x r` average-pooled grid.
pub fn reduced_kv_attention_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    attn: &AttentionVars,
    heads: usize,
    reduction: usize,
) -> Result<Var> {
    let [b, h, w, d] = grid_dims(g, x)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embedding dim {d} is not divisible by {heads} heads")));
    }
    let pooled = if reduction > 1 { g.avg_pool2d(x, reduction)? } else { x };
    let (ph, pw) = (h.div_ceil(reduction), w.div_ceil(reduction));
    let tokens = g.reshape(x, &[b, h * w, d])?;
    let kv_tokens = g.reshape(pooled, &[b, ph * pw, d])?;
    let scale = T::one() / T::from_f64((d / heads) as f64).sqrt();
    let q = g.linear(tokens, attn.q.0, Some(attn.q.1))?;
    let k = g.linear(kv_tokens, attn.k.0, Some(attn.k.1))?;
    let v = g.linear(kv_tokens, attn.v.0, Some(attn.v.1))?;
    let q = split_heads(g, q, heads, false)?;
    let q = g.scale(q, scale);
    let k_t = split_heads(g, k, heads, true)?;
    let v = split_heads(g, v, heads, false)?;
    let out = attention_core(g, q, k_t, v, None, None)?;
    let out = merge_heads(g, out)?;
    let out = g.linear(out, attn.o.0, Some(attn.o.1))?;
    g.reshape(out, &[b, h, w, d])
}
