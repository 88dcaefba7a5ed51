//! Position representations for grouped attention.
//!
//! [`DpbMlp`] maps a relative offset `(dx, dy)` to one bias per head. Inside a
//! group of extent `G` every offset lies in `[1 - G, G - 1]`, so the bias of
//! every key/query pair can be looked up from a `(2G-1) x (2G-1)` table that
//! costs `(2G-1)^2` MLP evaluations instead of one per pair. With a fixed `G`
//! that table is exactly a relative position bias ([`bake_dpb_to_rpb`]).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::autograd::{Graph, Var};
use crate::init::{trunc_normal, WEIGHT_STD};
use crate::lsda::GroupLayout;
use crate::{Error, Real, Result, Tensor};

/// Which position representation a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionKind {
    /// Learned absolute embedding added after the first embedding layer.
    Ape,
    /// Learned relative bias table of fixed size.
    Rpb,
    /// Dynamic position bias MLP.
    Dpb,
    /// DPB with skip connections around its two hidden blocks.
    DpbResidual,
}

impl PositionKind {
    pub fn is_dpb(self) -> bool {
        matches!(self, PositionKind::Dpb | PositionKind::DpbResidual)
    }
}

pub const DPB_LN_EPS: f64 = 1e-5;

/// Names of the DPB tensors below a prefix, in initialization order.
pub const DPB_PARAM_NAMES: [&str; 14] = [
    "proj.weight",
    "proj.bias",
    "ln1.gamma",
    "ln1.beta",
    "fc1.weight",
    "fc1.bias",
    "ln2.gamma",
    "ln2.beta",
    "fc2.weight",
    "fc2.bias",
    "ln3.gamma",
    "ln3.beta",
    "fc3.weight",
    "fc3.bias",
];

/// `linear(2 -> D/4)`, two `[LayerNorm, ReLU, linear(D/4 -> D/4)]` blocks,
/// then `[LayerNorm, ReLU, linear(D/4 -> heads)]`.
#[derive(Debug, Clone)]
pub struct DpbMlp<T> {
    /// Tensors in [`DPB_PARAM_NAMES`] order.
    pub tensors: Vec<Tensor<T>>,
    pub residual: bool,
    evaluations: Cell<u64>,
}

/// Shapes of the DPB tensors for hidden width `hidden` and `heads` outputs.
pub fn dpb_param_shapes(hidden: usize, heads: usize) -> [Vec<usize>; 14] {
    let v = |s: &[usize]| s.to_vec();
    [
        v(&[2, hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden, hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden, hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden]),
        v(&[hidden, heads]),
        v(&[heads]),
    ]
}

/// Initializes one DPB tensor: weights truncated normal, LayerNorm scales one,
/// everything else zero.
pub(crate) fn init_dpb_tensor<T: Real, R: rand::Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    if name.ends_with("weight") {
        trunc_normal(rng, shape, WEIGHT_STD)
    } else if name.ends_with("gamma") {
        Tensor::full(shape, T::one())
    } else {
        Tensor::zeros(shape)
    }
}

impl<T: Real> DpbMlp<T> {
    pub fn init<R: rand::Rng + ?Sized>(dim: usize, heads: usize, residual: bool, rng: &mut R) -> Self {
        let shapes = dpb_param_shapes(dim / 4, heads);
        let tensors = DPB_PARAM_NAMES
            .iter()
            .zip(shapes.iter())
            .map(|(n, s)| init_dpb_tensor(n, s, rng))
            .collect();
        DpbMlp {
            tensors,
            residual,
            evaluations: Cell::new(0),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>, residual: bool) -> Result<Self> {
        if tensors.len() != DPB_PARAM_NAMES.len() {
            return Err(Error::Config(format!(
                "DPB needs {} tensors, got {}",
                DPB_PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let hidden = tensors[0].shape().get(1).copied().unwrap_or(0);
        let heads = tensors[13].len();
        for (t, s) in tensors.iter().zip(dpb_param_shapes(hidden, heads).iter()) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape("DpbMlp", s, t.shape()));
            }
        }
        Ok(DpbMlp {
            tensors,
            residual,
            evaluations: Cell::new(0),
        })
    }

    pub fn heads(&self) -> usize {
        self.tensors[13].len()
    }

    pub fn hidden(&self) -> usize {
        self.tensors[1].len()
    }

    /// Number of offsets evaluated through this MLP so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.get()
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.set(0);
    }

    /// The final projection, zeroed. Every bias becomes 0.
    pub fn zero_output(&mut self) {
        for t in &mut self.tensors[12..14] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DpbVars {
        let v: Vec<Var> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        DpbVars::from_slice(&v, self.residual)
    }

    fn eval_rows(&self, offsets: Tensor<T>) -> Result<Tensor<T>> {
        let rows = offsets.shape()[0];
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(offsets);
        let out = dpb_mlp_graph(&mut g, &vars, x)?;
        self.evaluations.set(self.evaluations.get() + rows as u64);
        Ok(g.value(out).clone())
    }
}

/// Graph handles of a [`DpbMlp`].
#[derive(Debug, Clone, Copy)]
pub struct DpbVars {
    pub vars: [Var; 14],
    pub residual: bool,
}

impl DpbVars {
    pub fn from_slice(v: &[Var], residual: bool) -> Self {
        let mut vars = [v[0]; 14];
        vars.copy_from_slice(&v[..14]);
        DpbVars { vars, residual }
    }
}

/// Runs the MLP over `offsets` (`[R, 2]`), giving `[R, heads]`.
pub fn dpb_mlp_graph<T: Real>(g: &mut Graph<T>, p: &DpbVars, offsets: Var) -> Result<Var> {
    let v = &p.vars;
    let eps = T::from_f64(DPB_LN_EPS);
    let rows = g.shape(offsets)[0];
    let mut h = g.linear(offsets, v[0], Some(v[1]))?;
    for blk in 0..2 {
        let base = 2 + blk * 4;
        let t = g.layer_norm(h, v[base], v[base + 1], eps)?;
        let t = g.relu(t);
        let t = g.linear(t, v[base + 2], Some(v[base + 3]))?;
        h = if p.residual { g.add(h, t)? } else { t };
    }
    let t = g.layer_norm(h, v[10], v[11], eps)?;
    let t = g.relu(t);
    let out = g.linear(t, v[12], Some(v[13]))?;
    g.count_dpb_rows(rows);
    Ok(out)
}

/// Offsets `(1 - G + i, 1 - G + j)` for `0 <= i, j < 2G - 1`, row-major.
pub fn table_offsets<T: Real>(group: usize) -> Tensor<T> {
    let side = 2 * group - 1;
    let lo = 1.0 - group as f64;
    Tensor::from_fn(&[side * side, 2], |k| {
        let (row, col) = (k / 2, k % 2);
        let idx = if col == 0 { row / side } else { row % side };
        T::from_f64(lo + idx as f64)
    })
}

/// Bias table `[(2G-1)^2, heads]` recorded on `g`.
pub fn dpb_table_graph<T: Real>(g: &mut Graph<T>, p: &DpbVars, group: usize) -> Result<Var> {
    let offsets = g.constant(table_offsets(group));
    dpb_mlp_graph(g, p, offsets)
}

/// Biases of one offset, one per head.
pub fn dpb_eval<T: Real>(mlp: &DpbMlp<T>, dx: T, dy: T) -> Result<Tensor<T>> {
    let out = mlp.eval_rows(Tensor::new(&[1, 2], alloc::vec![dx, dy])?)?;
    out.reshape(&[mlp.heads()])
}

/// `(2G-1) x (2G-1) x heads` table with entry `(i, j)` = `DPB(1-G+i, 1-G+j)`.
pub fn build_bias_table<T: Real>(mlp: &DpbMlp<T>, group: usize) -> Result<Tensor<T>> {
    if group == 0 {
        return Err(Error::Config("bias table needs a group size >= 1".into()));
    }
    let side = 2 * group - 1;
    let out = mlp.eval_rows(table_offsets(group))?;
    out.reshape(&[side, side, mlp.heads()])
}

/// Index map from a `(2T-1)^2 x heads` table to a head-major `[heads, N, N]`
/// bias matrix for `layout`, with `T = reach`.
pub fn bias_index(layout: &GroupLayout, reach: usize, heads: usize) -> Result<Vec<Option<usize>>> {
    let n = layout.slots();
    let side = 2 * reach - 1;
    let r = reach as i64 - 1;
    let mut pos = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = layout.slot_coords(i);
        for j in 0..n {
            let (rj, cj) = layout.slot_coords(j);
            let (dx, dy) = (ri as i64 - rj as i64, ci as i64 - cj as i64);
            if dx.abs() > r || dy.abs() > r {
                return Err(Error::BiasRange {
                    dx,
                    dy,
                    reach: reach - 1,
                    max_group: reach,
                });
            }
            pos.push((((dx + r) as usize) * side + (dy + r) as usize) * heads);
        }
    }
    let mut index = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        index.extend(pos.iter().map(|&p| Some(p + h)));
    }
    Ok(index)
}

/// Looks up the `[heads, N, N]` bias of `layout` from a table var holding
/// `(2T-1)^2 * heads` values.
pub fn bias_from_table_graph<T: Real>(
    g: &mut Graph<T>,
    table: Var,
    reach: usize,
    layout: &GroupLayout,
    heads: usize,
) -> Result<Var> {
    let n = layout.slots();
    let index = bias_index(layout, reach, heads)?;
    g.gather(table, index, &[heads, n, n])
}

/// A position-bias source for grouped attention.
#[derive(Debug, Clone)]
pub enum BiasProvider<T> {
    /// No relative bias (APE models, or no position information).
    None,
    /// Fixed table `[2T-1, 2T-1, heads]` serving groups up to `T x T`.
    Rpb { table: Tensor<T>, reach: usize },
    Dpb(DpbMlp<T>),
}

impl<T: Real> BiasProvider<T> {
    pub fn rpb(table: Tensor<T>) -> Result<Self> {
        match *table.shape() {
            [a, b, _] if a == b && a % 2 == 1 => Ok(BiasProvider::Rpb {
                reach: a.div_ceil(2),
                table,
            }),
            _ => Err(Error::shape("rpb table", &[0, 0, 0], table.shape())),
        }
    }

    /// Records the `[heads, N, N]` bias for `layout` on `g`.
    pub fn bias_graph(&self, g: &mut Graph<T>, layout: &GroupLayout) -> Result<Option<Var>> {
        match self {
            BiasProvider::None => Ok(None),
            BiasProvider::Rpb { table, reach } => {
                let heads = table.shape()[2];
                let t = g.constant(table.clone());
                bias_from_table_graph(g, t, *reach, layout, heads).map(Some)
            }
            BiasProvider::Dpb(mlp) => {
                let vars = mlp.bind(g);
                let reach = layout.bias_extent();
                let t = dpb_table_graph(g, &vars, reach)?;
                mlp.evaluations.set(mlp.evaluations.get() + ((2 * reach - 1) * (2 * reach - 1)) as u64);
                bias_from_table_graph(g, t, reach, layout, mlp.heads()).map(Some)
            }
        }
    }

    /// `B[i][j][h]` for the slots of `layout`, shape `[N, N, heads]`.
    pub fn bias_matrix(&self, layout: &GroupLayout) -> Result<Option<Tensor<T>>> {
        let mut g = Graph::new();
        match self.bias_graph(&mut g, layout)? {
            None => Ok(None),
            Some(b) => {
                let b = g.permute(b, &[1, 2, 0])?;
                Ok(Some(g.value(b).clone()))
            }
        }
    }
}

/// A relative position bias whose table is the DPB table at fixed `group`.
pub fn bake_dpb_to_rpb<T: Real>(mlp: &DpbMlp<T>, group: usize) -> Result<BiasProvider<T>> {
    Ok(BiasProvider::Rpb {
        table: build_bias_table(mlp, group)?,
        reach: group,
    })
}

/// Learned absolute position embedding for an `H x W` grid of width `dim`.
pub fn ape_embed<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, grid: (usize, usize), dim: usize) -> Tensor<T> {
    trunc_normal(rng, &[grid.0, grid.1, dim], WEIGHT_STD)
}

/// Adds an APE table to `x` (`[B, H, W, D]`), rejecting other grid sizes.
pub fn add_ape_graph<T: Real>(g: &mut Graph<T>, x: Var, ape: Var) -> Result<Var> {
    let (xs, es) = (g.shape(x), g.shape(ape));
    if xs.len() != 4 || es.len() != 3 || xs[3] != es[2] {
        return Err(Error::shape("ape", es, xs));
    }
    if (xs[1], xs[2]) != (es[0], es[1]) {
        return Err(Error::GridMismatch {
            expected: (es[0], es[1]),
            actual: (xs[1], xs[2]),
        });
    }
    g.add(x, ape)
}

/// Fully qualified DPB tensor names under `prefix`.
pub fn dpb_names(prefix: &str) -> Vec<String> {
    DPB_PARAM_NAMES.iter().map(|n| format!("{prefix}.{n}")).collect()
}
