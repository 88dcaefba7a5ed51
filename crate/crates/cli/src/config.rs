//! Run configuration files.
//!
//! Line-oriented `key = value` pairs with `[stage.N]` sections. Blank lines
//! and lines starting with `#` are ignored. A file either names a built-in
//! `variant` (optionally with `task = dense`) and overrides some of its
//! fields, or spells out every stage:
//!
//! ```text
//! name = toy
//! bias = dpb
//! attn = lsda
//! input = 64 64
//! steps = 500
//!
//! [stage.0]
//! kernels = 4 8 16 32
//! stride = 4
//! dim = 16
//! heads = 1
//! group = 2
//! interval = 2
//! blocks = 1
//! ```
//!
//! `kernel_dims` is optional; without it the channels are split over the
//! kernels by the usual halving rule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crossformer_core::cel::CelSpec;
use crossformer_core::dpb::PositionKind;
use crossformer_core::model::{build_variant, AttentionMode, ModelSpec, StageSpec, Task, Variant};
use crossformer_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crossformer_core::Error),
}

fn syntax(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Syntax { line, msg: msg.into() }
}

/// A model plus the toy-training hyperparameters. `train.seed` also seeds
/// weight initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(model: ModelSpec) -> Self {
        RunConfig {
            model,
            train: TrainConfig::default(),
        }
    }

    pub fn variant(variant: Variant, task: Task) -> Self {
        Self::new(build_variant(variant, task))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// The fully explicit form; parsing it gives back `self`.
    pub fn emit(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", m.name);
        let _ = writeln!(s, "bias = {}", bias_name(m.position));
        let _ = writeln!(s, "attn = {}", attn_name(m.attention));
        let _ = writeln!(s, "input = {} {}", m.input_size.0, m.input_size.1);
        let _ = writeln!(s, "in_channels = {}", m.in_channels);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "drop_path = {}", m.drop_path);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "samples = {}", t.samples);
        let _ = writeln!(s, "classes = {}", t.classes);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "min_lr = {}", t.min_lr);
        let _ = writeln!(s, "warmup = {}", t.warmup);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "stop_at_full_accuracy = {}", t.stop_at_full_accuracy);
        for (i, st) in m.stages.iter().enumerate() {
            let _ = writeln!(s, "\n[stage.{i}]");
            let _ = writeln!(s, "kernels = {}", join(&st.cel.kernel_sizes));
            let _ = writeln!(s, "stride = {}", st.cel.stride);
            let _ = writeln!(s, "kernel_dims = {}", join(&st.cel.dims));
            let _ = writeln!(s, "dim = {}", st.dim);
            let _ = writeln!(s, "heads = {}", st.heads);
            let _ = writeln!(s, "group = {}", st.group);
            let _ = writeln!(s, "interval = {}", st.interval);
            let _ = writeln!(s, "blocks = {}", st.blocks);
        }
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn bias_name(p: PositionKind) -> &'static str {
    match p {
        PositionKind::Ape => "ape",
        PositionKind::Rpb => "rpb",
        PositionKind::Dpb => "dpb",
        PositionKind::DpbResidual => "dpb-res",
    }
}

pub fn parse_bias(s: &str) -> Option<PositionKind> {
    Some(match s {
        "ape" => PositionKind::Ape,
        "rpb" => PositionKind::Rpb,
        "dpb" => PositionKind::Dpb,
        "dpb-res" => PositionKind::DpbResidual,
        _ => return None,
    })
}

pub fn attn_name(a: AttentionMode) -> &'static str {
    match a {
        AttentionMode::Lsda => "lsda",
        AttentionMode::SdaOnly => "sda-only",
        AttentionMode::PvtLike => "pvt-like",
    }
}

pub fn parse_attn(s: &str) -> Option<AttentionMode> {
    Some(match s {
        "lsda" => AttentionMode::Lsda,
        "sda-only" => AttentionMode::SdaOnly,
        "pvt-like" => AttentionMode::PvtLike,
        _ => return None,
    })
}

/// `S`, `small`, `S-dense`, `toy`, ...
pub fn parse_variant_name(s: &str) -> Result<(Variant, Task), crossformer_core::Error> {
    let lower = s.to_ascii_lowercase();
    match lower.strip_suffix("-dense") {
        Some(base) => Ok((base.parse()?, Task::Dense)),
        None => Ok((lower.parse()?, Task::Classification)),
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn value<T: FromStr>(e: &Entry) -> Result<T, ConfigError> {
    e.value
        .parse()
        .map_err(|_| syntax(e.line, format!("invalid value `{}` for `{}`", e.value, e.key)))
}

fn list(e: &Entry) -> Result<Vec<usize>, ConfigError> {
    e.value
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| syntax(e.line, format!("invalid list `{}` for `{}`", e.value, e.key))))
        .collect()
}

#[derive(Default)]
struct StageDraft {
    kernels: Option<Vec<usize>>,
    stride: Option<usize>,
    kernel_dims: Option<Vec<usize>>,
    dim: Option<usize>,
    heads: Option<usize>,
    group: Option<usize>,
    interval: Option<usize>,
    blocks: Option<usize>,
}

impl StageDraft {
    fn set(&mut self, e: &Entry) -> Result<(), ConfigError> {
        let dup = || syntax(e.line, format!("duplicate key `{}`", e.key));
        macro_rules! put {
            ($field:ident, $v:expr) => {{
                if self.$field.is_some() {
                    return Err(dup());
                }
                self.$field = Some($v);
            }};
        }
        match e.key {
            "kernels" => put!(kernels, list(e)?),
            "stride" => put!(stride, value(e)?),
            "kernel_dims" => put!(kernel_dims, list(e)?),
            "dim" => put!(dim, value(e)?),
            "heads" => put!(heads, value(e)?),
            "group" => put!(group, value(e)?),
            "interval" => put!(interval, value(e)?),
            "blocks" => put!(blocks, value(e)?),
            k => return Err(syntax(e.line, format!("unknown stage key `{k}`"))),
        }
        Ok(())
    }

    /// Applies the draft over `base`, or builds a stage from scratch.
    fn build(self, idx: usize, base: Option<&StageSpec>) -> Result<StageSpec, ConfigError> {
        let missing = |k: &str| ConfigError::Invalid(format!("[stage.{idx}] is missing `{k}`"));
        let pick = |v: Option<usize>, b: Option<usize>, k: &str| v.or(b).ok_or_else(|| missing(k));
        let dim = pick(self.dim, base.map(|b| b.dim), "dim")?;
        let heads = pick(self.heads, base.map(|b| b.heads), "heads")?;
        let group = pick(self.group, base.map(|b| b.group), "group")?;
        let interval = pick(self.interval, base.map(|b| b.interval), "interval")?;
        let blocks = pick(self.blocks, base.map(|b| b.blocks), "blocks")?;
        let stride = pick(self.stride, base.map(|b| b.cel.stride), "stride")?;
        let cel_changed = self.kernels.is_some() || self.stride.is_some() || self.dim.is_some();
        let kernels = match (self.kernels, base) {
            (Some(k), _) => k,
            (None, Some(b)) => b.cel.kernel_sizes.clone(),
            (None, None) => return Err(missing("kernels")),
        };
        let cel = match (self.kernel_dims, base) {
            (Some(d), _) => CelSpec::with_dims(&kernels, stride, &d)?,
            (None, Some(b)) if !cel_changed => b.cel.clone(),
            _ => CelSpec::new(&kernels, stride, dim)?,
        };
        Ok(StageSpec {
            cel,
            dim,
            heads,
            group,
            interval,
            blocks,
        })
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut top: Vec<Entry> = Vec::new();
        let mut sections: BTreeMap<usize, Vec<Entry>> = BTreeMap::new();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(h) = l.strip_prefix('[') {
                let idx = h
                    .strip_suffix(']')
                    .and_then(|h| h.trim().strip_prefix("stage."))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| syntax(line, format!("bad section header `{l}`")))?;
                if sections.contains_key(&idx) {
                    return Err(syntax(line, format!("duplicate section [stage.{idx}]")));
                }
                sections.insert(idx, Vec::new());
                current = Some(idx);
                continue;
            }
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("expected `key = value`, got `{l}`")))?;
            let e = Entry {
                line,
                key: key.trim(),
                value: value.trim(),
            };
            match current {
                Some(idx) => sections.get_mut(&idx).expect("section exists").push(e),
                None => {
                    if top.iter().any(|t| t.key == e.key) {
                        return Err(syntax(line, format!("duplicate key `{}`", e.key)));
                    }
                    top.push(e);
                }
            }
        }

        let find = |k: &str| top.iter().find(|e| e.key == k);
        let base = match find("variant") {
            Some(e) => {
                let (v, mut task) = parse_variant_name(e.value).map_err(|err| syntax(e.line, err.to_string()))?;
                if let Some(t) = find("task") {
                    task = match t.value {
                        "classification" => Task::Classification,
                        "dense" => Task::Dense,
                        other => return Err(syntax(t.line, format!("unknown task `{other}`"))),
                    };
                }
                Some(build_variant(v, task))
            }
            None => {
                if let Some(t) = find("task") {
                    return Err(syntax(t.line, "`task` needs a `variant`"));
                }
                None
            }
        };

        let n_stages = match &base {
            Some(b) => b.stages.len(),
            None => sections.len(),
        };
        if let Some((&idx, _)) = sections.iter().find(|(&idx, _)| idx >= n_stages) {
            return Err(ConfigError::Invalid(match &base {
                Some(b) => format!("[stage.{idx}] does not exist in variant {}", b.name),
                None => format!("stage sections must be numbered 0..{n_stages}, found [stage.{idx}]"),
            }));
        }
        if base.is_none() && n_stages == 0 {
            return Err(ConfigError::Invalid("config names no `variant` and has no [stage.N] sections".into()));
        }
        let mut stages = Vec::with_capacity(n_stages);
        for idx in 0..n_stages {
            let mut draft = StageDraft::default();
            for e in sections.remove(&idx).unwrap_or_default() {
                draft.set(&e)?;
            }
            stages.push(draft.build(idx, base.as_ref().map(|b| &b.stages[idx]))?);
        }

        let mut model = base.unwrap_or_else(|| ModelSpec {
            name: "custom".into(),
            stages: Vec::new(),
            in_channels: 3,
            num_classes: 10,
            position: PositionKind::Dpb,
            attention: AttentionMode::Lsda,
            input_size: (224, 224),
            drop_path: 0.0,
            mlp_ratio: 4,
        });
        model.stages = stages;
        let mut train = TrainConfig::default();
        for e in &top {
            match e.key {
                "variant" | "task" => {}
                "name" => model.name = e.value.to_string(),
                "bias" => {
                    model.position = parse_bias(e.value).ok_or_else(|| syntax(e.line, format!("unknown bias `{}`", e.value)))?
                }
                "attn" => {
                    model.attention =
                        parse_attn(e.value).ok_or_else(|| syntax(e.line, format!("unknown attention `{}`", e.value)))?
                }
                "input" => match list(e)?.as_slice() {
                    &[h, w] => model.input_size = (h, w),
                    _ => return Err(syntax(e.line, "`input` takes two extents: H W")),
                },
                "in_channels" => model.in_channels = value(e)?,
                "num_classes" => model.num_classes = value(e)?,
                "mlp_ratio" => model.mlp_ratio = value(e)?,
                "drop_path" => model.drop_path = value(e)?,
                "seed" => train.seed = value(e)?,
                "samples" => train.samples = value(e)?,
                "classes" => train.classes = value(e)?,
                "steps" => train.steps = value(e)?,
                "batch" => train.batch = value(e)?,
                "lr" => train.lr = value(e)?,
                "min_lr" => train.min_lr = value(e)?,
                "warmup" => train.warmup = value(e)?,
                "weight_decay" => train.weight_decay = value(e)?,
                "stop_at_full_accuracy" => train.stop_at_full_accuracy = value(e)?,
                k => return Err(syntax(e.line, format!("unknown key `{k}`"))),
            }
        }
        model.validate()?;
        model.stage_grids(model.input_size)?;
        Ok(RunConfig { model, train })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_with_overrides() {
        let cfg: RunConfig = "variant = S\nbias = ape\n\n[stage.2]\nblocks = 4\n".parse().unwrap();
        let mut want = build_variant(Variant::Small, Task::Classification);
        want.position = PositionKind::Ape;
        want.stages[2].blocks = 4;
        assert_eq!(cfg.model, want);
    }

    #[test]
    fn dense_variant() {
        let a: RunConfig = "variant = t\ntask = dense".parse().unwrap();
        let b: RunConfig = "variant = T-dense".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.stages[0].group, 14);
    }

    #[test]
    fn kernel_change_reallocates_dims() {
        let cfg: RunConfig = "variant = toy\n[stage.0]\nkernels = 4 8\n".parse().unwrap();
        assert_eq!(cfg.model.stages[0].cel.dims, [8, 8]);
    }

    #[test]
    fn errors() {
        for bad in [
            "variant = huge",
            "variant = toy\nvariant = toy",
            "variant = toy\nbias = learned",
            "variant = toy\n[stage.4]\ndim = 8",
            "variant = toy\n[stage.0]\nwidth = 8",
            "variant = toy\n[stage.0]\ndim = 20",
            "variant = toy\ninput = 64",
            "variant = toy\ninput = 63 64",
            "name = x\n[stage.1]\ndim = 8",
            "task = dense",
            "just words",
            "[stages.0]",
            "",
        ] {
            assert!(bad.parse::<RunConfig>().is_err(), "{bad:?} parsed");
        }
    }

    #[test]
    fn line_numbers_in_errors() {
        let err = "variant = toy\n\nsteps = many".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn builtin_roundtrip() {
        for v in Variant::ALL {
            for task in [Task::Classification, Task::Dense] {
                let cfg = RunConfig::variant(v, task);
                assert_eq!(cfg.emit().parse::<RunConfig>().unwrap(), cfg);
            }
        }
    }
}
