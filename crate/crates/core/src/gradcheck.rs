//! Finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BackwardFault, Graph, Var};
use crate::model::{model_forward_graph, ModelSpec, ParamStore, ParamVars};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Self::default()
        }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
            max_per_input: None,
            seed: 0,
            fault: None,
        }
    }
}

/// Worst entry of one input tensor.
#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    /// Inputs sorted by decreasing error.
    pub fn worst_offenders(&self, n: usize) -> Vec<&InputReport> {
        let mut v: Vec<&InputReport> = self.inputs.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(n);
        v
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], fault: Option<BackwardFault>) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", &[1], v.shape()));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective = {}", v.data()[0])));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences, input by input. `names` labels the inputs in the report.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    names: &[&str],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = eval(&f, inputs, opts.fault)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let coords: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut rep = InputReport {
            name: names.get(i).map_or_else(|| format!("input{i}"), |s| String::from(*s)),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let (gp, _, op) = eval(&f, &work, None)?;
            work[i].data_mut()[c] = orig - opts.step;
            let (gm, _, om) = eval(&f, &work, None)?;
            work[i].data_mut()[c] = orig;
            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric, opts.floor);
            if err > rep.max_rel_error || rep.checked == 0 {
                rep.max_rel_error = err;
                rep.worst_index = c;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        inputs: reports,
        max_rel_error: max,
        tol: opts.tol,
    })
}

/// `params` plus uniform noise in `[-scale, scale]`. At initialization scale
/// the DPB LayerNorms see tiny activations and amplify a finite-difference
/// step enough to cross ReLU kinks; checking at a jittered point avoids
/// that.
pub fn jitter(params: &ParamStore<f64>, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
    out
}

/// Checks the gradient of the cross-entropy loss of a whole model with
/// respect to every parameter tensor. Stochastic depth is off.
pub fn model_grad_check(
    spec: &ModelSpec,
    params: &ParamStore<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            let pv = ParamVars::from_named(&names, vars);
            let x = g.constant(images.clone());
            let out = model_forward_graph(g, spec, &pv, x, None)?;
            g.cross_entropy(out.logits, labels)
        },
        &inputs,
        &names,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[3, 4], 1);
        let rep = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &["x"],
            &GradCheckOptions::with_tol(1e-8),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    fn softmax_objective(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let s = g.softmax_lastdim(v[0])?;
        let w = g.mul(s, v[1])?;
        Ok(g.sum(w))
    }

    #[test]
    fn corrupted_softmax_backward_is_caught() {
        let inputs = [random(&[2, 5], 2), random(&[2, 5], 3)];
        let ok = grad_check(softmax_objective, &inputs, &["x", "w"], &GradCheckOptions::default()).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let opts = GradCheckOptions {
            fault: Some(BackwardFault::Softmax),
            ..GradCheckOptions::default()
        };
        let bad = grad_check(softmax_objective, &inputs, &["x", "w"], &opts).unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.worst_offenders(1)[0].name, "x");
    }

    #[test]
    fn non_finite_objective_aborts() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let l = g.constant(Tensor::new(&[1], vec![f64::INFINITY]).unwrap());
                let s = g.add(v[0], l)?;
                Ok(g.sum(s))
            },
            &[x],
            &["x"],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
