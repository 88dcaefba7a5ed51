//! Model specifications, the named variants, weight initialization and the
//! forward pass.
//!
//! A model is four stages. Each stage embeds its input with a cross-scale
//! embedding layer and then runs pre-norm transformer blocks whose attention
//! alternates between SDA (even blocks) and LDA (odd blocks). Parameters live
//! in a flat [`ParamStore`] keyed by dotted names such as
//! `stage2.block3.attn.q.weight`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::cel::{cel_forward_graph, CelSpec};
use crate::dpb::{
    add_ape_graph, bias_from_table_graph, build_bias_table, dpb_names, dpb_param_shapes, dpb_table_graph,
    DpbMlp, DpbVars, PositionKind, DPB_PARAM_NAMES,
};
use crate::init::{rng, trunc_normal, SeededRng, WEIGHT_STD};
use crate::lsda::{lsda_forward_graph, reduced_kv_attention_graph, AttentionVars, GroupLayout, GroupMode};
use crate::{Error, Real, Result, Tensor};

/// Hidden width of the block MLP relative to the embedding dimension.
pub const MLP_RATIO: usize = 4;
pub const LN_EPS: f64 = 1e-5;
/// Key/value pooling factor per stage in [`AttentionMode::PvtLike`].
pub const PVT_REDUCTIONS: [usize; 4] = [8, 4, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
    /// Four small stages at 64x64 input, for tests and toy training.
    Toy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Tiny, Variant::Small, Variant::Base, Variant::Large, Variant::Toy];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Tiny => "T",
            Variant::Small => "S",
            Variant::Base => "B",
            Variant::Large => "L",
            Variant::Toy => "toy",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "tiny" => Ok(Variant::Tiny),
            "s" | "small" => Ok(Variant::Small),
            "b" | "base" => Ok(Variant::Base),
            "l" | "large" => Ok(Variant::Large),
            "toy" => Ok(Variant::Toy),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

/// Classification uses the ImageNet grouping; dense prediction widens the
/// first two stages for larger inputs. Weight shapes are the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// SDA and LDA alternate.
    Lsda,
    /// Every block uses SDA (local windows only).
    SdaOnly,
    /// Global attention with keys/values average-pooled per
    /// [`PVT_REDUCTIONS`]. No relative bias.
    PvtLike,
}

/// Attention used by one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAttention {
    Sda,
    Lda,
    Reduced(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub cel: CelSpec,
    pub dim: usize,
    pub heads: usize,
    pub group: usize,
    pub interval: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub position: PositionKind,
    pub attention: AttentionMode,
    /// Input `(H, W)` the model is built for. Sets the APE grid and the RPB
    /// table range.
    pub input_size: (usize, usize),
    /// Stochastic-depth rate of the last block; earlier blocks interpolate
    /// linearly from 0.
    pub drop_path: f64,
    pub mlp_ratio: usize,
}

/// Stage-1 kernels of the full cross-scale embedding.
pub const STAGE1_KERNELS: [usize; 4] = [4, 8, 16, 32];
/// Kernels of the stage-2..4 embeddings.
pub const MERGE_KERNELS: [usize; 2] = [2, 4];

/// Builds stages from per-stage `(dim, heads, blocks, group, interval)`.
pub fn pyramid(
    first_kernels: &[usize],
    later_kernels: &[usize],
    rows: [(usize, usize, usize, usize, usize); 4],
) -> Result<Vec<StageSpec>> {
    rows.iter()
        .enumerate()
        .map(|(s, &(dim, heads, blocks, group, interval))| {
            let (kernels, stride) = if s == 0 { (first_kernels, 4) } else { (later_kernels, 2) };
            Ok(StageSpec {
                cel: CelSpec::new(kernels, stride, dim)?,
                dim,
                heads,
                group,
                interval,
                blocks,
            })
        })
        .collect()
}

pub fn build_variant(variant: Variant, task: Task) -> ModelSpec {
    let (dims, heads, blocks, drop_path) = match variant {
        Variant::Tiny => ([64, 128, 256, 512], [2, 4, 8, 16], [1, 1, 8, 6], 0.1),
        Variant::Small => ([96, 192, 384, 768], [3, 6, 12, 24], [2, 2, 6, 2], 0.2),
        Variant::Base => ([96, 192, 384, 768], [3, 6, 12, 24], [2, 2, 18, 2], 0.3),
        Variant::Large => ([128, 256, 512, 1024], [4, 8, 16, 32], [2, 2, 18, 2], 0.5),
        Variant::Toy => ([16, 32, 64, 128], [1, 2, 4, 8], [1, 1, 2, 1], 0.0),
    };
    let (groups, intervals, input_size) = match (variant, task) {
        (Variant::Toy, _) => ([2, 2, 2, 2], [2, 2, 1, 1], (64, 64)),
        (_, Task::Classification) => ([7, 7, 7, 7], [8, 4, 2, 1], (224, 224)),
        (_, Task::Dense) => ([14, 14, 7, 7], [16, 8, 2, 1], (800, 1280)),
    };
    let rows = core::array::from_fn(|s| (dims[s], heads[s], blocks[s], groups[s], intervals[s]));
    let stages = pyramid(&STAGE1_KERNELS, &MERGE_KERNELS, rows).expect("built-in variants are valid");
    let name = match task {
        Task::Classification => format!("{variant}"),
        Task::Dense => format!("{variant}-dense"),
    };
    ModelSpec {
        name,
        stages,
        in_channels: 3,
        num_classes: if variant == Variant::Toy { 10 } else { 1000 },
        position: PositionKind::Dpb,
        attention: AttentionMode::Lsda,
        input_size,
        drop_path,
        mlp_ratio: MLP_RATIO,
    }
}

pub fn stage_prefix(s: usize) -> String {
    format!("stage{s}")
}

pub fn block_prefix(s: usize, b: usize) -> String {
    format!("stage{s}.block{b}")
}

impl ModelSpec {
    /// Replaces every stage's kernel set, keeping strides and dims.
    pub fn with_cel_kernels(mut self, first: &[usize], later: &[usize]) -> Result<Self> {
        for (s, st) in self.stages.iter_mut().enumerate() {
            let kernels = if s == 0 { first } else { later };
            st.cel = CelSpec::new(kernels, st.cel.stride, st.dim)?;
        }
        Ok(self)
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a model needs at least one stage".into()));
        }
        if self.attention == AttentionMode::PvtLike && self.stages.len() > PVT_REDUCTIONS.len() {
            return Err(Error::Config("the PVT-like mode defines reductions for four stages".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("classes, input channels and MLP ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop-path rate {} outside [0, 1)", self.drop_path)));
        }
        for (s, st) in self.stages.iter().enumerate() {
            st.cel.validate()?;
            if st.cel.total_dim() != st.dim {
                return Err(Error::Config(format!(
                    "stage {s}: embedding dims sum to {} but D is {}",
                    st.cel.total_dim(),
                    st.dim
                )));
            }
            if st.heads == 0 || st.dim % st.heads != 0 {
                return Err(Error::Config(format!("stage {s}: D={} not divisible by H={}", st.dim, st.heads)));
            }
            if st.dim % 4 != 0 {
                return Err(Error::Config(format!("stage {s}: D={} not divisible by 4", st.dim)));
            }
            if st.blocks == 0 || st.group == 0 || st.interval == 0 {
                return Err(Error::Config(format!("stage {s}: blocks, G and I must be positive")));
            }
            if s > 0 && st.dim != 2 * self.stages[s - 1].dim {
                return Err(Error::Config(format!(
                    "stage {s}: D={} does not double the previous stage's {}",
                    st.dim,
                    self.stages[s - 1].dim
                )));
            }
        }
        Ok(())
    }

    /// Output grid of every stage for an `(H, W)` input.
    pub fn stage_grids(&self, size: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let mut grid = size;
        self.stages
            .iter()
            .map(|st| {
                grid = st.cel.output_grid(grid.0, grid.1)?;
                Ok(grid)
            })
            .collect()
    }

    pub fn block_attention(&self, s: usize, b: usize) -> BlockAttention {
        match self.attention {
            AttentionMode::Lsda if b % 2 == 1 => BlockAttention::Lda,
            AttentionMode::Lsda | AttentionMode::SdaOnly => BlockAttention::Sda,
            AttentionMode::PvtLike => BlockAttention::Reduced(PVT_REDUCTIONS[s]),
        }
    }

    /// Grouping of block `b` in stage `s` on a `grid`; `None` for the
    /// ungrouped PVT-like attention.
    pub fn layout(&self, s: usize, b: usize, grid: (usize, usize)) -> Result<Option<GroupLayout>> {
        let st = &self.stages[s];
        let (mode, param) = match self.block_attention(s, b) {
            BlockAttention::Sda => (GroupMode::Sda, st.group),
            BlockAttention::Lda => (GroupMode::Lda, st.interval),
            BlockAttention::Reduced(_) => return Ok(None),
        };
        GroupLayout::new(mode, grid.0, grid.1, param).map(Some)
    }

    /// Whether blocks carry a relative bias (RPB table or DPB).
    pub fn has_relative_bias(&self) -> bool {
        self.attention != AttentionMode::PvtLike && matches!(
            self.position,
            PositionKind::Rpb | PositionKind::Dpb | PositionKind::DpbResidual
        )
    }

    /// Group extent an RPB table of block `(s, b)` must cover at the built
    /// input size.
    pub fn rpb_reach(&self, s: usize, b: usize) -> Result<usize> {
        let grid = self.stage_grids(self.input_size)?[s];
        Ok(self.layout(s, b, grid)?.map_or(0, |l| l.bias_extent()))
    }

    /// Per-block drop-path rates, linear from 0 to `drop_path`.
    pub fn drop_path_rates(&self) -> Vec<Vec<f64>> {
        let total = self.total_blocks();
        let mut k = 0;
        self.stages
            .iter()
            .map(|st| {
                (0..st.blocks)
                    .map(|_| {
                        let r = if total > 1 { self.drop_path * k as f64 / (total - 1) as f64 } else { 0.0 };
                        k += 1;
                        r
                    })
                    .collect()
            })
            .collect()
    }

    /// Every learnable tensor in initialization order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let grids = self.stage_grids(self.input_size)?;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
        let mut cin = self.in_channels;
        for (s, st) in self.stages.iter().enumerate() {
            let sp = stage_prefix(s);
            if s > 0 {
                push(format!("{sp}.merge_norm.gamma"), &[cin]);
                push(format!("{sp}.merge_norm.beta"), &[cin]);
            }
            for (i, (ws, d)) in st.cel.weight_shapes(cin).into_iter().enumerate() {
                push(format!("{sp}.cel.proj{i}.weight"), &ws);
                push(format!("{sp}.cel.proj{i}.bias"), &[d]);
            }
            let d = st.dim;
            if s == 0 {
                push(format!("{sp}.embed_norm.gamma"), &[d]);
                push(format!("{sp}.embed_norm.beta"), &[d]);
                if self.position == PositionKind::Ape {
                    push("ape".into(), &[grids[0].0, grids[0].1, d]);
                }
            }
            for b in 0..st.blocks {
                let bp = block_prefix(s, b);
                push(format!("{bp}.norm1.gamma"), &[d]);
                push(format!("{bp}.norm1.beta"), &[d]);
                for p in ["q", "k", "v", "o"] {
                    push(format!("{bp}.attn.{p}.weight"), &[d, d]);
                    push(format!("{bp}.attn.{p}.bias"), &[d]);
                }
                if self.has_relative_bias() {
                    if self.position == PositionKind::Rpb {
                        let side = 2 * self.rpb_reach(s, b)? - 1;
                        push(format!("{bp}.attn.rpb_table"), &[side, side, st.heads]);
                    } else {
                        for (n, shape) in dpb_names(&format!("{bp}.attn.dpb"))
                            .into_iter()
                            .zip(dpb_param_shapes(d / 4, st.heads))
                        {
                            push(n, &shape);
                        }
                    }
                }
                let hidden = d * self.mlp_ratio;
                push(format!("{bp}.norm2.gamma"), &[d]);
                push(format!("{bp}.norm2.beta"), &[d]);
                push(format!("{bp}.mlp.fc1.weight"), &[d, hidden]);
                push(format!("{bp}.mlp.fc1.bias"), &[hidden]);
                push(format!("{bp}.mlp.fc2.weight"), &[hidden, d]);
                push(format!("{bp}.mlp.fc2.bias"), &[d]);
            }
            cin = d;
        }
        push("final_norm.gamma".into(), &[cin]);
        push("final_norm.beta".into(), &[cin]);
        push("head.weight".into(), &[cin, self.num_classes]);
        push("head.bias".into(), &[self.num_classes]);
        Ok(out)
    }
}

/// Named model tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the store holds exactly the tensors `spec` needs.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        for (name, shape) in &shapes {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", shape, t.shape()));
            }
        }
        if shapes.len() != self.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !shapes.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Truncated-normal weights (std 0.02), zero biases and shifts, unit norm
/// scales. Deterministic per seed.
pub fn init_weights<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (name, shape) in spec.param_shapes()? {
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else {
            trunc_normal(&mut r, &shape, WEIGHT_STD)
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Graph handles of every parameter.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Pairs `names[i]` with `vars[i]`.
    pub fn from_named<S: AsRef<str>>(names: &[S], vars: &[Var]) -> Self {
        ParamVars {
            vars: names.iter().map(|n| String::from(n.as_ref())).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn pair(&self, prefix: &str, a: &str, b: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{prefix}.{a}"))?, self.get(&format!("{prefix}.{b}"))?))
    }

    fn linear(&self, prefix: &str) -> Result<(Var, Var)> {
        self.pair(prefix, "weight", "bias")
    }

    fn norm(&self, prefix: &str) -> Result<(Var, Var)> {
        self.pair(prefix, "gamma", "beta")
    }
}

/// Puts every tensor of `store` on `g`, as trainable parameters when
/// `trainable`, otherwise as constants.
pub fn bind_params<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> ParamVars {
    let vars = store
        .iter()
        .map(|(k, t)| {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            (k.clone(), v)
        })
        .collect();
    ParamVars { vars }
}

/// Graph outputs of [`model_forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: Var,
    /// Output of every stage, `[B, H_s, W_s, D_s]`.
    pub stage_outputs: Vec<Var>,
    pub stage_grids: Vec<(usize, usize)>,
}

fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, p: (Var, Var)) -> Result<Var> {
    g.layer_norm(x, p.0, p.1, T::from_f64(LN_EPS))
}

/// Scales each sample of `branch` by 0 or `1 / (1 - rate)`.
fn drop_path<T: Real>(g: &mut Graph<T>, branch: Var, rate: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(branch) };
    if rate <= 0.0 {
        return Ok(branch);
    }
    let shape = g.shape(branch).to_vec();
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(&mask_shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(branch, m)
}

/// The `[heads, N, N]` relative bias of block `(s, b)` on `layout`.
pub fn block_bias_graph<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    s: usize,
    b: usize,
    layout: &GroupLayout,
) -> Result<Option<Var>> {
    if !spec.has_relative_bias() {
        return Ok(None);
    }
    let heads = spec.stages[s].heads;
    let bp = block_prefix(s, b);
    match spec.position {
        PositionKind::Rpb => {
            let table = vars.get(&format!("{bp}.attn.rpb_table"))?;
            let reach = g.shape(table)[0].div_ceil(2);
            bias_from_table_graph(g, table, reach, layout, heads).map(Some)
        }
        _ => {
            let dv: Vec<Var> = dpb_names(&format!("{bp}.attn.dpb"))
                .iter()
                .map(|n| vars.get(n))
                .collect::<Result<_>>()?;
            let p = DpbVars::from_slice(&dv, spec.position == PositionKind::DpbResidual);
            let reach = layout.bias_extent();
            let table = dpb_table_graph(g, &p, reach)?;
            bias_from_table_graph(g, table, reach, layout, heads).map(Some)
        }
    }
}

/// `x + attn(norm1(x))`, then `+ mlp(norm2(.))`, with per-sample drop path
/// when `rng` is given.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_graph<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    s: usize,
    b: usize,
    x: Var,
    drop_rate: f64,
    mut rng: Option<&mut SeededRng>,
) -> Result<Var> {
    let st = &spec.stages[s];
    let bp = block_prefix(s, b);
    let grid = match *g.shape(x) {
        [_, h, w, _] => (h, w),
        ref other => return Err(Error::shape("block", &[0, 0, 0, st.dim], other)),
    };
    let attn = AttentionVars {
        q: vars.linear(&format!("{bp}.attn.q"))?,
        k: vars.linear(&format!("{bp}.attn.k"))?,
        v: vars.linear(&format!("{bp}.attn.v"))?,
        o: vars.linear(&format!("{bp}.attn.o"))?,
    };
    let h = layer_norm(g, x, vars.norm(&format!("{bp}.norm1"))?)?;
    let a = match spec.block_attention(s, b) {
        BlockAttention::Reduced(r) => reduced_kv_attention_graph(g, h, &attn, st.heads, r)?,
        _ => {
            let layout = spec.layout(s, b, grid)?.expect("grouped attention has a layout");
            let bias = block_bias_graph(g, spec, vars, s, b, &layout)?;
            lsda_forward_graph(g, h, &layout, &attn, st.heads, bias)?
        }
    };
    let a = drop_path(g, a, drop_rate, rng.as_deref_mut())?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, vars.norm(&format!("{bp}.norm2"))?)?;
    let (w1, b1) = vars.linear(&format!("{bp}.mlp.fc1"))?;
    let h = g.linear(h, w1, Some(b1))?;
    let h = g.gelu(h);
    let (w2, b2) = vars.linear(&format!("{bp}.mlp.fc2"))?;
    let h = g.linear(h, w2, Some(b2))?;
    let h = drop_path(g, h, drop_rate, rng)?;
    g.add(x, h)
}

/// Records the full model on `g` for `images` (`[B, H, W, C]`). Passing an
/// `rng` enables stochastic depth.
pub fn model_forward_graph<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    images: Var,
    mut rng: Option<&mut SeededRng>,
) -> Result<ForwardGraph> {
    let (h0, w0) = match *g.shape(images) {
        [_, h, w, c] if c == spec.in_channels => (h, w),
        ref other => return Err(Error::shape("model input", &[0, 0, 0, spec.in_channels], other)),
    };
    let grids = spec.stage_grids((h0, w0))?;
    let rates = spec.drop_path_rates();
    let mut x = images;
    let mut stage_outputs = Vec::with_capacity(spec.stages.len());
    for (s, st) in spec.stages.iter().enumerate() {
        let sp = stage_prefix(s);
        if s > 0 {
            x = layer_norm(g, x, vars.norm(&format!("{sp}.merge_norm"))?)?;
        }
        let convs: Vec<(Var, Var)> = (0..st.cel.kernel_sizes.len())
            .map(|i| vars.linear(&format!("{sp}.cel.proj{i}")))
            .collect::<Result<_>>()?;
        x = cel_forward_graph(g, x, &st.cel, &convs)?;
        if s == 0 {
            x = layer_norm(g, x, vars.norm(&format!("{sp}.embed_norm"))?)?;
            if spec.position == PositionKind::Ape {
                let ape = vars.get("ape")?;
                x = add_ape_graph(g, x, ape)?;
            }
        }
        for b in 0..st.blocks {
            x = block_forward_graph(g, spec, vars, s, b, x, rates[s][b], rng.as_deref_mut())?;
        }
        stage_outputs.push(x);
    }
    let x = layer_norm(g, x, vars.norm("final_norm")?)?;
    let pooled = g.mean_axes(x, &[1, 2])?;
    let (hw, hb) = vars.linear("head")?;
    let logits = g.linear(pooled, hw, Some(hb))?;
    Ok(ForwardGraph {
        logits,
        stage_outputs,
        stage_grids: grids,
    })
}

/// A specification with its weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

/// Value-level forward results.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub stage_grids: Vec<(usize, usize)>,
    /// Multiply-accumulates performed.
    pub macs: u64,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_weights(&spec, seed)?;
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Model { spec, params })
    }

    /// Inference on `images` (`[B, H, W, C]`).
    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, false);
        let x = g.constant(images.clone());
        let out = model_forward_graph(&mut g, &self.spec, &vars, x, None)?;
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            stage_grids: out.stage_grids,
            macs: g.macs(),
        })
    }

    /// The DPB module of block `(s, b)`.
    pub fn dpb(&self, s: usize, b: usize) -> Result<DpbMlp<T>> {
        let prefix = format!("{}.attn.dpb", block_prefix(s, b));
        let tensors = dpb_names(&prefix)
            .iter()
            .map(|n| self.params.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        DpbMlp::from_tensors(tensors, self.spec.position == PositionKind::DpbResidual)
    }

    /// Replaces every DPB module by the fixed table it produces at the built
    /// input size. The result is an RPB model.
    pub fn bake_dpb(&self) -> Result<Model<T>> {
        if !self.spec.position.is_dpb() {
            return Err(Error::Config(format!(
                "model `{}` uses {:?} position bias, not DPB",
                self.spec.name, self.spec.position
            )));
        }
        let mut spec = self.spec.clone();
        spec.position = PositionKind::Rpb;
        let mut params = self.params.clone();
        if self.spec.has_relative_bias() {
            for (s, st) in self.spec.stages.iter().enumerate() {
                for b in 0..st.blocks {
                    let mlp = self.dpb(s, b)?;
                    let table = build_bias_table(&mlp, self.spec.rpb_reach(s, b)?)?;
                    let bp = block_prefix(s, b);
                    for n in DPB_PARAM_NAMES {
                        params.remove(&format!("{bp}.attn.dpb.{n}"));
                    }
                    params.insert(format!("{bp}.attn.rpb_table"), table);
                }
            }
        }
        Model::from_parts(spec, params)
    }
}
