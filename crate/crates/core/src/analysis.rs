//! Closed-form parameter and multiply-accumulate accounting.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions, linear layers,
//! the two attention matmuls and the DPB table MLP are counted; softmax,
//! normalization, activations and pooling are not. Projections inside padded
//! groups are counted over the padded slots, as executed.

use alloc::vec::Vec;
use core::fmt;

use crate::dpb::PositionKind;
use crate::model::{BlockAttention, ModelSpec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mechanism {
    /// Embedding convolutions and the norms around them.
    Cel,
    /// Pre-attention norm, Q/K/V/O projections and attention matmuls.
    Attention,
    /// Pre-MLP norm and the two MLP layers.
    Mlp,
    /// Position information: APE, RPB tables, DPB modules.
    Bias,
    /// Final norm and classifier.
    Head,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Cel,
        Mechanism::Attention,
        Mechanism::Mlp,
        Mechanism::Bias,
        Mechanism::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Cel => "cel",
            Mechanism::Attention => "attention",
            Mechanism::Mlp => "mlp",
            Mechanism::Bias => "bias",
            Mechanism::Head => "head",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEntry {
    /// `None` for the head.
    pub stage: Option<usize>,
    pub mechanism: Mechanism,
    pub params: u64,
    pub macs: u64,
}

/// Parameters and per-image multiply-accumulates, split by stage and
/// mechanism.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub input_size: (usize, usize),
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    fn add(&mut self, stage: Option<usize>, mechanism: Mechanism, params: u64, macs: u64) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.stage == stage && e.mechanism == mechanism)
        {
            Some(e) => {
                e.params += params;
                e.macs += macs;
            }
            None => self.entries.push(CostEntry {
                stage,
                mechanism,
                params,
                macs,
            }),
        }
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// `(params, macs)` of one stage (`None` for the head).
    pub fn stage(&self, stage: Option<usize>) -> (u64, u64) {
        self.sum_where(|e| e.stage == stage)
    }

    pub fn mechanism(&self, m: Mechanism) -> (u64, u64) {
        self.sum_where(|e| e.mechanism == m)
    }

    fn sum_where(&self, f: impl Fn(&CostEntry) -> bool) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| f(e))
            .fold((0, 0), |(p, m), e| (p + e.params, m + e.macs))
    }
}

/// Tokens after padding, group count and slots per group for one grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupCounts {
    pub padded_tokens: u64,
    pub groups: u64,
    pub slots: u64,
    /// Longest slot extent of a group along either axis.
    pub extent: u64,
}

pub fn group_counts(attn: BlockAttention, (h, w): (usize, usize), group: usize, interval: usize) -> GroupCounts {
    let p = match attn {
        BlockAttention::Sda => group,
        _ => interval,
    };
    let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let (groups, eh, ew) = match attn {
        BlockAttention::Sda => ((ph / p) * (pw / p), p, p),
        _ => (p * p, ph / p, pw / p),
    };
    GroupCounts {
        padded_tokens: (ph * pw) as u64,
        groups: groups as u64,
        slots: (eh * ew) as u64,
        extent: eh.max(ew) as u64,
    }
}

/// `QKᵀ` plus `attn·V` multiply-accumulates of grouped attention.
pub fn grouped_attention_macs(c: GroupCounts, dim: usize) -> u64 {
    2 * c.groups * c.slots * c.slots * dim as u64
}

/// The same two matmuls over one ungrouped `tokens`-long sequence.
pub fn full_attention_macs(tokens: usize, dim: usize) -> u64 {
    2 * (tokens as u64) * (tokens as u64) * dim as u64
}

/// Scalars of one DPB module for width `dim` and `heads` outputs.
pub fn dpb_params(dim: usize, heads: usize) -> u64 {
    let q = (dim / 4) as u64;
    let h = heads as u64;
    let proj = 2 * q + q;
    let hidden = 2 * (2 * q + q * q + q);
    let out = 2 * q + q * h + h;
    proj + hidden + out
}

/// Multiply-accumulates of one DPB pass over `rows` offsets.
pub fn dpb_macs(dim: usize, heads: usize, rows: u64) -> u64 {
    let q = (dim / 4) as u64;
    rows * (2 * q + 2 * q * q + q * heads as u64)
}

/// Parameter counts, with multiply-accumulates at the built input size.
pub fn count_params(spec: &ModelSpec) -> Result<CostReport> {
    count_flops(spec, spec.input_size)
}

/// Parameters and multiply-accumulates for one `(H, W)` image.
pub fn count_flops(spec: &ModelSpec, size: (usize, usize)) -> Result<CostReport> {
    spec.validate()?;
    let grids = spec.stage_grids(size)?;
    let built_grids = spec.stage_grids(spec.input_size)?;
    let mut r = CostReport {
        input_size: size,
        entries: Vec::new(),
    };
    let mut cin = spec.in_channels as u64;
    for (s, st) in spec.stages.iter().enumerate() {
        let stage = Some(s);
        let (h, w) = grids[s];
        let tokens = (h * w) as u64;
        let d = st.dim as u64;
        if s > 0 {
            r.add(stage, Mechanism::Cel, 2 * cin, 0);
        }
        for (&k, &dk) in st.cel.kernel_sizes.iter().zip(&st.cel.dims) {
            let (k, dk) = (k as u64, dk as u64);
            r.add(stage, Mechanism::Cel, k * k * cin * dk + dk, tokens * k * k * cin * dk);
        }
        if s == 0 {
            r.add(stage, Mechanism::Cel, 2 * d, 0);
            if spec.position == PositionKind::Ape {
                let (bh, bw) = built_grids[0];
                r.add(stage, Mechanism::Bias, (bh * bw) as u64 * d, 0);
            }
        }
        for b in 0..st.blocks {
            let attn = spec.block_attention(s, b);
            r.add(stage, Mechanism::Attention, 2 * d + 4 * (d * d + d), 0);
            match attn {
                BlockAttention::Reduced(red) => {
                    let kv = (h.div_ceil(red) * w.div_ceil(red)) as u64;
                    let proj = 2 * tokens * d * d + 2 * kv * d * d;
                    r.add(stage, Mechanism::Attention, 0, proj + 2 * tokens * kv * d);
                }
                _ => {
                    let c = group_counts(attn, (h, w), st.group, st.interval);
                    let proj = 4 * c.padded_tokens * d * d;
                    r.add(stage, Mechanism::Attention, 0, proj + grouped_attention_macs(c, st.dim));
                    if spec.has_relative_bias() {
                        if spec.position == PositionKind::Rpb {
                            let built = group_counts(attn, built_grids[s], st.group, st.interval);
                            let side = 2 * built.extent - 1;
                            r.add(stage, Mechanism::Bias, side * side * st.heads as u64, 0);
                        } else {
                            let rows = (2 * c.extent - 1) * (2 * c.extent - 1);
                            r.add(
                                stage,
                                Mechanism::Bias,
                                dpb_params(st.dim, st.heads),
                                dpb_macs(st.dim, st.heads, rows),
                            );
                        }
                    }
                }
            }
            let hidden = d * spec.mlp_ratio as u64;
            r.add(
                stage,
                Mechanism::Mlp,
                2 * d + 2 * d * hidden + hidden + d,
                2 * tokens * d * hidden,
            );
        }
        cin = d;
    }
    let c = spec.num_classes as u64;
    r.add(None, Mechanism::Head, 2 * cin + cin * c + c, cin * c);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_variant, Task, Variant};

    #[test]
    fn totals_are_sums_of_parts() {
        let spec = build_variant(Variant::Small, Task::Classification);
        let r = count_params(&spec).unwrap();
        let by_stage: u64 = (0..4).map(|s| r.stage(Some(s)).0).sum::<u64>() + r.stage(None).0;
        let by_mech: u64 = Mechanism::ALL.iter().map(|&m| r.mechanism(m).0).sum();
        assert_eq!(by_stage, r.total_params());
        assert_eq!(by_mech, r.total_params());
        let macs: u64 = Mechanism::ALL.iter().map(|&m| r.mechanism(m).1).sum();
        assert_eq!(macs, r.total_macs());
    }

    #[test]
    fn group_counts_for_padded_grids() {
        let c = group_counts(BlockAttention::Sda, (7, 5), 3, 0);
        assert_eq!((c.padded_tokens, c.groups, c.slots, c.extent), (54, 6, 9, 3));
        let c = group_counts(BlockAttention::Lda, (56, 56), 7, 8);
        assert_eq!((c.groups, c.slots, c.extent), (64, 49, 7));
        let c = group_counts(BlockAttention::Lda, (6, 4), 7, 2);
        assert_eq!((c.groups, c.slots, c.extent), (4, 6, 3));
    }

    #[test]
    fn grouped_cost_is_g_over_s_squared_of_full() {
        let (s, g, d) = (56usize, 7usize, 96usize);
        let c = group_counts(BlockAttention::Sda, (s, s), g, 0);
        let grouped = grouped_attention_macs(c, d) as f64;
        let full = full_attention_macs(s * s, d) as f64;
        let ratio = (g * g) as f64 / (s * s) as f64;
        assert!((grouped / full - ratio).abs() < 1e-15);
    }

    #[test]
    fn dpb_module_size() {
        // D=96: hidden 24, three heads
        assert_eq!(dpb_params(96, 3), 72 + 2 * (48 + 576 + 24) + 48 + 72 + 3);
    }
}
