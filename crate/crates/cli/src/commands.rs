use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crossformer_core::analysis::{count_flops, count_params, Mechanism};
use crossformer_core::data::synth_dataset;
use crossformer_core::gradcheck::{jitter, model_grad_check, GradCheckOptions, InputReport};
use crossformer_core::init::{rng, uniform};
use crossformer_core::model::{init_weights, Model, ModelSpec, Task, Variant};
use crossformer_core::train::train_toy;
use crossformer_core::{BackwardFault, DType, Real};

use crate::bench::{check_scaling, run_bench};
use crate::checkpoint::Checkpoint;
use crate::config::{attn_name, bias_name, RunConfig};
use crate::targets::matching;
use crate::{sidecar_path, CliError, ModelArgs, Result};

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn giga(n: u64) -> String {
    format!("{:.2}G", n as f64 / 1e9)
}

fn describe(spec: &ModelSpec) -> String {
    format!(
        "{} (bias {}, attn {}, built for {}x{})",
        spec.name,
        bias_name(spec.position),
        attn_name(spec.attention),
        spec.input_size.0,
        spec.input_size.1
    )
}

pub fn cmd_variants(out: &mut dyn Write, include_toy: bool) -> Result<()> {
    let mut list: Vec<(Variant, Task)> = Vec::new();
    for task in [Task::Classification, Task::Dense] {
        for v in [Variant::Tiny, Variant::Small, Variant::Base, Variant::Large] {
            list.push((v, task));
        }
    }
    if include_toy {
        list.push((Variant::Toy, Task::Classification));
    }
    for (v, task) in list {
        let spec = RunConfig::variant(v, task).model;
        let r = count_params(&spec)?;
        let grids = spec.stage_grids(spec.input_size)?;
        writeln!(
            out,
            "{:<8} {:<14} input {}x{}  {} params  {} FLOPs  drop-path {}",
            spec.name,
            format!("{task:?}").to_lowercase(),
            spec.input_size.0,
            spec.input_size.1,
            millions(r.total_params()),
            giga(r.total_macs()),
            spec.drop_path
        )?;
        writeln!(out, "  stage  grid        kernels         stride  dim   heads  G   I   blocks")?;
        for (s, st) in spec.stages.iter().enumerate() {
            let kernels: Vec<String> = st.cel.kernel_sizes.iter().map(usize::to_string).collect();
            writeln!(
                out,
                "  {:<5}  {:<10}  {:<14}  {:<6}  {:<4}  {:<5}  {:<2}  {:<2}  {}",
                s + 1,
                format!("{}x{}", grids[s].0, grids[s].1),
                kernels.join(","),
                st.cel.stride,
                st.dim,
                st.heads,
                st.group,
                st.interval,
                st.blocks
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn cmd_count(out: &mut dyn Write, args: &ModelArgs, csv: bool) -> Result<()> {
    let spec = args.resolve("S")?.model;
    let size = args.size().unwrap_or(spec.input_size);
    let r = count_flops(&spec, size)?;
    let stages: Vec<Option<usize>> = (0..spec.stages.len()).map(Some).chain([None]).collect();
    if csv {
        writeln!(out, "stage,mechanism,params,macs")?;
        for &s in &stages {
            for e in r.entries.iter().filter(|e| e.stage == s) {
                let st = s.map_or("head".to_string(), |s| (s + 1).to_string());
                writeln!(out, "{st},{},{},{}", e.mechanism, e.params, e.macs)?;
            }
        }
        writeln!(out, "total,,{},{}", r.total_params(), r.total_macs())?;
    } else {
        writeln!(out, "{}", describe(&spec))?;
        writeln!(out, "counted at {}x{}", size.0, size.1)?;
        writeln!(out, "{:<7} {:<10} {:>12} {:>15}", "stage", "mechanism", "params", "MACs")?;
        for &s in &stages {
            for e in r.entries.iter().filter(|e| e.stage == s) {
                let st = s.map_or("head".to_string(), |s| (s + 1).to_string());
                writeln!(out, "{st:<7} {:<10} {:>12} {:>15}", e.mechanism.name(), e.params, e.macs)?;
            }
        }
        for m in Mechanism::ALL {
            let (p, f) = r.mechanism(m);
            writeln!(out, "{:<7} {:<10} {:>12} {:>15}", "all", m.name(), p, f)?;
        }
        writeln!(out, "{:<18} {:>12} {:>15}", "total", r.total_params(), r.total_macs())?;
        writeln!(out, "params {}  FLOPs {}", millions(r.total_params()), giga(r.total_macs()))?;
    }

    let mut failed = Vec::new();
    for reference in matching(&spec) {
        let c = reference.check(&r);
        let flops_checked = size == spec.input_size;
        let ok = c.params_ok && (c.flops_ok || !flops_checked);
        let flops = if flops_checked {
            format!(
                "FLOPs {} vs {} ({:+.2}%, tol {:.0}%)",
                giga(c.flops),
                giga(reference.flops as u64),
                100.0 * c.flops_rel,
                100.0 * reference.flops_tol
            )
        } else {
            "FLOPs not checked at this size".to_string()
        };
        writeln!(
            out,
            "{}  {:<17} params {} vs {} ({:+.2}%, tol {:.1}%)  {flops}",
            if ok { "PASS" } else { "FAIL" },
            reference.label,
            millions(c.params),
            millions(reference.params as u64),
            100.0 * c.params_rel,
            100.0 * reference.params_tol
        )?;
        if !ok {
            failed.push(reference.label);
        }
    }
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!("counts outside tolerance: {}", failed.join(", "))));
    }
    Ok(())
}

fn random_images(spec: &ModelSpec, batch: usize, size: (usize, usize), seed: u64) -> crossformer_core::Tensor<f32> {
    uniform(&mut rng(seed), &[batch, size.0, size.1, spec.in_channels], -1.0, 1.0)
}

pub fn cmd_forward(out: &mut dyn Write, args: &ModelArgs, checkpoint: Option<&Path>, batch: usize) -> Result<()> {
    let cfg = match checkpoint {
        Some(p) => args.resolve_for_checkpoint(p)?,
        None => args.resolve("toy")?,
    };
    let spec = cfg.model;
    let seed = cfg.train.seed;
    let model = match checkpoint {
        Some(p) => Model::<f32>::from_parts(spec.clone(), Checkpoint::load(p)?.to_store())?,
        None => Model::<f32>::new(spec.clone(), seed)?,
    };
    let size = args.size().unwrap_or(spec.input_size);
    let images = random_images(&spec, batch.max(1), size, seed.wrapping_add(1));
    writeln!(out, "{}", describe(&spec))?;
    let t = Instant::now();
    let y = model.forward(&images)?;
    let secs = t.elapsed().as_secs_f64();
    let grids: Vec<String> = y.stage_grids.iter().map(|(h, w)| format!("{h}x{w}")).collect();
    writeln!(out, "input {}x{}x{}  batch {}", size.0, size.1, spec.in_channels, batch.max(1))?;
    writeln!(out, "stage grids {}", grids.join(" "))?;
    // per-image counts, except the DPB tables which are built once per pass
    let r = count_flops(&spec, size)?;
    let bias = r.mechanism(Mechanism::Bias).1;
    let expected = (r.total_macs() - bias) * batch.max(1) as u64 + bias;
    writeln!(out, "MACs executed {}  (closed form {})", y.macs, expected)?;
    writeln!(out, "time {:.3}s", secs)?;
    let classes = spec.num_classes;
    for (i, row) in y.logits.data().chunks(classes).enumerate() {
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        let head: Vec<String> = row.iter().take(6).map(|v| format!("{v:+.5}")).collect();
        writeln!(out, "image {i}: argmax {arg} ({max:+.5})  logits[..{}] {}", head.len(), head.join(" "))?;
    }
    if !y.logits.all_finite() {
        return Err(crossformer_core::Error::NonFinite("forward logits".into()).into());
    }
    Ok(())
}

pub struct GradcheckArgs {
    pub tol: f64,
    pub samples: usize,
    pub max_per_input: Option<usize>,
    pub jitter: f64,
    pub max_params: u64,
    pub fault: Option<BackwardFault>,
}

/// Coarse grouping of parameter names for the gradcheck report:
/// `stage2.cel`, `stage2.block1.attn`, `stage2.block1.dpb`,
/// `stage2.block1.mlp`, `ape`, `head`.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [s, b, rest @ ..] if s.starts_with("stage") && b.starts_with("block") => {
            let m = match rest {
                ["attn", "dpb", ..] => "dpb",
                ["attn", ..] | ["norm1", ..] => "attn",
                _ => "mlp",
            };
            format!("{s}.{b}.{m}")
        }
        [s, ..] if s.starts_with("stage") => format!("{s}.cel"),
        ["ape"] => "ape".to_string(),
        _ => "head".to_string(),
    }
}

pub fn cmd_gradcheck(out: &mut dyn Write, args: &ModelArgs, opts: &GradcheckArgs) -> Result<()> {
    let mut cfg = args.resolve("toy")?;
    if let Some(s) = args.size() {
        cfg.model.input_size = s;
    }
    let mut spec = cfg.model;
    spec.num_classes = cfg.train.classes;
    let n = count_params(&spec)?.total_params();
    if n > opts.max_params {
        return Err(CliError::Usage(format!(
            "gradcheck is for toy-scale models: {} has {n} parameters (limit {})",
            spec.name, opts.max_params
        )));
    }
    let (h, w) = spec.input_size;
    if h != w {
        return Err(CliError::Usage(format!("gradcheck needs a square input, got {h}x{w}")));
    }
    let seed = cfg.train.seed;
    let params = jitter(&init_weights::<f64>(&spec, seed)?, seed.wrapping_add(1), opts.jitter);
    let data = synth_dataset::<f64>(seed, opts.samples.max(1), h, cfg.train.classes)?;
    let gc = GradCheckOptions {
        tol: opts.tol,
        max_per_input: opts.max_per_input,
        seed,
        fault: opts.fault,
        ..GradCheckOptions::default()
    };
    writeln!(out, "{}  {} parameters, {} tensors", describe(&spec), n, params.len())?;
    if let Some(f) = opts.fault {
        writeln!(out, "backward fault injected: {f:?}")?;
    }
    let t = Instant::now();
    let rep = model_grad_check(&spec, &params, &data.images, &data.labels, &gc)?;

    let mut groups: BTreeMap<String, (usize, usize, Option<&InputReport>)> = BTreeMap::new();
    for r in &rep.inputs {
        let g = groups.entry(param_group(&r.name)).or_default();
        g.0 += 1;
        g.1 += r.checked;
        if g.2.map_or(true, |w| r.max_rel_error > w.max_rel_error) {
            g.2 = Some(r);
        }
    }
    writeln!(
        out,
        "{:<22} {:>7} {:>7} {:>11}  worst entry (analytic / numeric)",
        "group", "tensors", "checked", "max rel err"
    )?;
    for (name, (tensors, checked, worst)) in &groups {
        let w = worst.expect("every group has a tensor");
        writeln!(
            out,
            "{name:<22} {tensors:>7} {checked:>7} {:>11.3e}  {}[{}] {:+.6e} / {:+.6e}",
            w.max_rel_error, w.name, w.worst_index, w.analytic, w.numeric
        )?;
    }
    let verdict = if rep.passed() { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "{verdict}: max relative error {:.3e} (tol {:.0e}) over {} entries in {:.1}s",
        rep.max_rel_error,
        rep.tol,
        rep.inputs.iter().map(|r| r.checked).sum::<usize>(),
        t.elapsed().as_secs_f64()
    )?;
    if !rep.passed() {
        return Err(CliError::CheckFailed(format!(
            "gradient check failed: max relative error {:.3e} > {:.0e}",
            rep.max_rel_error, rep.tol
        )));
    }
    Ok(())
}

pub fn cmd_train_toy(out: &mut dyn Write, cfg: &RunConfig, log_every: usize, path: &Path) -> Result<()> {
    let mut spec = cfg.model.clone();
    spec.num_classes = cfg.train.classes;
    writeln!(
        out,
        "{}  {} samples, {} classes, {} steps, lr {}",
        describe(&spec),
        cfg.train.samples,
        cfg.train.classes,
        cfg.train.steps,
        cfg.train.lr
    )?;
    let mut io_err = None;
    let last = cfg.train.steps.saturating_sub(1);
    let result = train_toy::<f64>(&spec, &cfg.train, |l| {
        if (l.step % log_every == 0 || l.step == last) && io_err.is_none() {
            if let Err(e) = writeln!(
                out,
                "step {:>4}  loss {:.6}  acc {:.3}  lr {:.3e}",
                l.step, l.loss, l.accuracy, l.lr
            ) {
                io_err = Some(e);
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let (model, report) = result?;
    match report.full_accuracy_step {
        Some(s) => writeln!(out, "reached 100% training accuracy at step {s}")?,
        None => writeln!(out, "did not reach 100% training accuracy")?,
    }
    writeln!(out, "final accuracy {:.3}", report.final_accuracy)?;
    Checkpoint::from_store(&model.params).save(path)?;
    let side = sidecar_path(path);
    let saved = RunConfig {
        model: spec,
        train: cfg.train.clone(),
    };
    std::fs::write(&side, saved.emit())?;
    writeln!(out, "wrote {} and {}", path.display(), side.display())?;
    Ok(())
}

pub fn cmd_bench(
    out: &mut dyn Write,
    sizes: &[usize],
    group: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    repeats: usize,
) -> Result<()> {
    let rows = run_bench(sizes, group, dim, heads, seed, repeats)?;
    writeln!(out, "grouped (G={group}) vs full attention, dim {dim}, {heads} head(s)")?;
    writeln!(
        out,
        "{:>5} {:>7} {:>14} {:>7} {:>16} {:>8} {:>11} {:>11}",
        "S", "tokens", "grouped MACs", "growth", "full MACs", "growth", "grouped ms", "full ms"
    )?;
    for (i, r) in rows.iter().enumerate() {
        let growth = |now: u64, prev: Option<u64>| prev.map_or("-".to_string(), |p| format!("x{:.2}", now as f64 / p as f64));
        let prev = i.checked_sub(1).map(|j| &rows[j]);
        writeln!(
            out,
            "{:>5} {:>7} {:>14} {:>7} {:>16} {:>8} {:>11.3} {:>11.3}",
            r.size,
            r.size * r.size,
            r.lsda_macs,
            growth(r.lsda_macs, prev.map(|p| p.lsda_macs)),
            r.full_macs,
            growth(r.full_macs, prev.map(|p| p.full_macs)),
            1e3 * r.lsda_secs,
            1e3 * r.full_secs
        )?;
    }
    match check_scaling(&rows, group) {
        Ok(()) => {
            writeln!(out, "PASS: grouped MACs grow with S^2, full attention with S^4")?;
            Ok(())
        }
        Err(e) => {
            writeln!(out, "FAIL: {e}")?;
            Err(CliError::CheckFailed(e))
        }
    }
}

fn bake_typed<T: Real>(spec: &ModelSpec, ck: &Checkpoint) -> Result<(Model<f32>, Model<f32>, Checkpoint)> {
    let live = Model::<T>::from_parts(spec.clone(), ck.to_store())?;
    let baked = live.bake_dpb()?;
    let out = Checkpoint::from_store(&baked.params);
    let live32 = Model::from_parts(live.spec, live.params.cast())?;
    let baked32 = Model::from_parts(baked.spec, baked.params.cast())?;
    Ok((live32, baked32, out))
}

/// Largest logit difference tolerated between the live and baked models.
pub const BAKE_TOL: f64 = 1e-6;

pub fn cmd_bake_dpb(out: &mut dyn Write, checkpoint: &Path, args: &ModelArgs, path: &Path) -> Result<()> {
    let mut cfg = args.resolve_for_checkpoint(checkpoint)?;
    if let Some(s) = args.size() {
        cfg.model.input_size = s;
    }
    let spec = cfg.model.clone();
    if !spec.position.is_dpb() {
        return Err(CliError::Usage(format!(
            "{} uses {} position bias; only DPB checkpoints can be baked",
            spec.name,
            bias_name(spec.position)
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let (live, baked, baked_ck) = match ck.dtype() {
        Some(DType::F64) => bake_typed::<f64>(&spec, &ck)?,
        Some(DType::F32) => bake_typed::<f32>(&spec, &ck)?,
        None => return Err(CliError::Usage("checkpoint is empty or mixes precisions".into())),
    };
    writeln!(out, "{}", describe(&spec))?;
    for (s, st) in spec.stages.iter().enumerate() {
        let reach: Vec<String> = (0..st.blocks)
            .map(|b| spec.rpb_reach(s, b).map(|r| r.to_string()))
            .collect::<crossformer_core::Result<_>>()?;
        writeln!(out, "stage {} tables cover groups up to {}", s + 1, reach.join("/"))?;
    }
    let images = random_images(&spec, 2, spec.input_size, cfg.train.seed.wrapping_add(1));
    let a = live.forward(&images)?.logits;
    let b = baked.forward(&images)?.logits;
    let diff = a.max_abs_diff(&b)? as f64;
    let ok = diff <= BAKE_TOL;
    writeln!(
        out,
        "{}: live DPB vs baked RPB logits differ by {diff:.3e} (tol {BAKE_TOL:.0e}, 32-bit)",
        if ok { "PASS" } else { "FAIL" }
    )?;
    baked_ck.save(path)?;
    let reloaded = Checkpoint::load(path)?;
    if reloaded != baked_ck {
        return Err(CliError::CheckFailed(format!("{} did not read back identically", path.display())));
    }
    let side = sidecar_path(path);
    std::fs::write(
        &side,
        RunConfig {
            model: baked.spec.clone(),
            train: cfg.train.clone(),
        }
        .emit(),
    )?;
    writeln!(out, "wrote {} ({} tensors) and {}", path.display(), baked_ck.len(), side.display())?;
    if !ok {
        return Err(CliError::CheckFailed(format!("baked model differs by {diff:.3e}")));
    }
    Ok(())
}
