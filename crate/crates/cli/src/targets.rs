//! Published parameter and FLOP figures for the named ImageNet
//! configurations, with the tolerance each is checked at.

use crossformer_core::analysis::CostReport;
use crossformer_core::dpb::PositionKind;
use crossformer_core::model::{build_variant, ModelSpec, Task, Variant, MERGE_KERNELS, STAGE1_KERNELS};

/// Stage-1 / later-stage kernels of the embedding ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CelKind {
    /// 4, 8, 16, 32 then 2, 4.
    Cross,
    /// 4 then 2.
    Single,
    /// 4, 8 then 2, 4.
    TwoKernel,
}

impl CelKind {
    pub fn kernels(self) -> (&'static [usize], &'static [usize]) {
        match self {
            CelKind::Cross => (&STAGE1_KERNELS, &MERGE_KERNELS),
            CelKind::Single => (&[4], &[2]),
            CelKind::TwoKernel => (&[4, 8], &[2, 4]),
        }
    }
}

/// `variant` for classification with the given position mode and
/// embedding kernels.
pub fn reference_spec(variant: Variant, position: PositionKind, cel: CelKind) -> ModelSpec {
    let mut spec = build_variant(variant, Task::Classification);
    spec.position = position;
    let (first, later) = cel.kernels();
    spec.with_cel_kernels(first, later).expect("reference kernels are valid")
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub label: &'static str,
    pub spec: ModelSpec,
    pub params: f64,
    /// Relative tolerance on parameters.
    pub params_tol: f64,
    /// Multiply-accumulates at the model's built input size.
    pub flops: f64,
    pub flops_tol: f64,
}

/// Outcome of checking one report against one reference.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub params: u64,
    pub params_rel: f64,
    pub params_ok: bool,
    pub flops: u64,
    pub flops_rel: f64,
    pub flops_ok: bool,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.params_ok && self.flops_ok
    }
}

impl Reference {
    pub fn check(&self, report: &CostReport) -> Check {
        let params = report.total_params();
        let flops = report.total_macs();
        let params_rel = params as f64 / self.params - 1.0;
        let flops_rel = flops as f64 / self.flops - 1.0;
        Check {
            params,
            params_rel,
            params_ok: params_rel.abs() <= self.params_tol,
            flops,
            flops_rel,
            flops_ok: flops_rel.abs() <= self.flops_tol,
        }
    }
}

fn r(label: &'static str, spec: ModelSpec, params: f64, params_tol: f64, flops: f64, flops_tol: f64) -> Reference {
    Reference {
        label,
        spec,
        params,
        params_tol,
        flops,
        flops_tol,
    }
}

pub fn references() -> Vec<Reference> {
    use PositionKind::*;
    use Variant::*;
    let dpb = |v| reference_spec(v, Dpb, CelKind::Cross);
    vec![
        r("T", dpb(Tiny), 27.8e6, 0.02, 2.9e9, 0.10),
        r("S", dpb(Small), 30.7e6, 0.02, 4.9e9, 0.10),
        r("B", dpb(Base), 52.0e6, 0.02, 9.2e9, 0.10),
        r("L", dpb(Large), 92.0e6, 0.02, 16.1e9, 0.10),
        r("S/APE", reference_spec(Small, Ape, CelKind::Cross), 30.9342e6, 0.015, 4.9061e9, 0.10),
        r("S/RPB", reference_spec(Small, Rpb, CelKind::Cross), 30.6159e6, 0.015, 4.9062e9, 0.10),
        r("S/DPB", dpb(Small), 30.6573e6, 0.015, 4.9098e9, 0.10),
        r("S/DPB-residual", reference_spec(Small, DpbResidual, CelKind::Cross), 30.6573e6, 0.015, 4.9098e9, 0.10),
        r("S/CEL single", reference_spec(Small, Dpb, CelKind::Single), 28.3e6, 0.02, 4.5e9, 0.10),
        r("S/CEL two-kernel", reference_spec(Small, Dpb, CelKind::TwoKernel), 30.6e6, 0.02, 4.8e9, 0.10),
        r("S/CEL full", dpb(Small), 30.7e6, 0.02, 4.9e9, 0.10),
    ]
}

/// References describing exactly `spec`.
pub fn matching(spec: &ModelSpec) -> Vec<Reference> {
    references().into_iter().filter(|r| &r.spec == spec).collect()
}
