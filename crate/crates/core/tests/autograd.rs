use crossformer_core::gradcheck::{grad_check, GradCheckOptions};
use crossformer_core::init::{rng, uniform};
use crossformer_core::tensor::{inverse_permutation, numel};
use crossformer_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut rng(seed), shape, -1.0, 1.0)
}

/// `sum(y * c)` for a fixed random `c`, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let c = g.constant(rand_t(g.shape(y), seed ^ 0xabc));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn check(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    tol: f64,
) -> f64 {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let opts = GradCheckOptions {
        max_per_input: Some(48),
        ..GradCheckOptions::with_tol(tol)
    };
    let rep = grad_check(f, inputs, &names, &opts).unwrap();
    assert!(rep.passed(), "max rel error {} > {tol}: {:?}", rep.max_rel_error, rep.worst_offenders(2));
    rep.max_rel_error
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=8, 1..=5).prop_filter("keep small", |s| numel(s) <= 600)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops(shape in shape_strategy(), seed in 0u64..1000) {
        let x = rand_t(&shape, seed);
        let y = rand_t(&shape, seed + 1);
        check(|g, v| { let s = g.add(v[0], v[1])?; probe(g, s, seed) }, &[x.clone(), y.clone()], 1e-5);
        check(|g, v| { let s = g.sub(v[0], v[1])?; probe(g, s, seed) }, &[x.clone(), y.clone()], 1e-5);
        check(|g, v| { let s = g.mul(v[0], v[1])?; probe(g, s, seed) }, &[x.clone(), y], 1e-5);
        check(|g, v| { let s = g.scale(v[0], 0.37); probe(g, s, seed) }, &[x.clone()], 1e-5);
        check(|g, v| { let s = g.gelu(v[0]); probe(g, s, seed) }, &[x.clone()], 1e-5);
        let away = x.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
        check(|g, v| { let s = g.relu(v[0]); probe(g, s, seed) }, &[away], 1e-5);
    }

    #[test]
    fn broadcast_mul(shape in shape_strategy(), seed in 0u64..1000, mask in any::<u8>()) {
        let small: Vec<usize> = shape.iter().enumerate().map(|(i, &e)| if mask >> i & 1 == 1 { 1 } else { e }).collect();
        let x = rand_t(&shape, seed);
        let y = rand_t(&small, seed + 7);
        check(|g, v| { let s = g.mul(v[0], v[1])?; probe(g, s, seed) }, &[x, y], 1e-5);
    }

    #[test]
    fn reshape_permute_roundtrip_and_grads(shape in shape_strategy(), seed in 0u64..1000, perm_seed in any::<u64>()) {
        let x = rand_t(&shape, seed);
        let mut order: Vec<usize> = (0..shape.len()).collect();
        let mut s = perm_seed;
        for i in (1..order.len()).rev() {
            order.swap(i, (s % (i as u64 + 1)) as usize);
            s /= i as u64 + 1;
        }
        let p = x.permute(&order).unwrap();
        let back = p.permute(&inverse_permutation(&order)).unwrap();
        prop_assert_eq!(&back, &x);
        let flat = x.reshape(&[x.len()]).unwrap().reshape(&shape).unwrap();
        prop_assert_eq!(&flat, &x);
        check(|g, v| { let s = g.permute(v[0], &order)?; probe(g, s, seed) }, &[x.clone()], 1e-5);
        check(|g, v| { let s = g.reshape(v[0], &[x.len()])?; probe(g, s, seed) }, &[x.clone()], 1e-5);
    }

    #[test]
    fn reductions(shape in shape_strategy(), seed in 0u64..1000, axis_bits in 1u8..32) {
        let x = rand_t(&shape, seed);
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| axis_bits >> a & 1 == 1).collect();
        prop_assume!(!axes.is_empty() && axes.len() < shape.len());
        check(|g, v| { let s = g.mean_axes(v[0], &axes)?; probe(g, s, seed) }, &[x.clone()], 1e-5);
        check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5);
    }

    #[test]
    fn softmax_properties(shape in shape_strategy(), seed in 0u64..1000, shift in -50.0f64..50.0) {
        let base = rand_t(&shape, seed);
        let x = base.map(|v| v * 4.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.softmax_lastdim(xv).unwrap();
        let sh = g.constant(x.map(|v| v + shift));
        let s2 = g.softmax_lastdim(sh).unwrap();
        let last = *shape.last().unwrap();
        for (row, row2) in g.value(s).data().chunks(last).zip(g.value(s2).data().chunks(last)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            for (a, b) in row.iter().zip(row2) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
        check(|g, v| { let s = g.softmax_lastdim(v[0])?; probe(g, s, seed) }, &[base], 1e-6);
    }

    #[test]
    fn layer_norm_grads(shape in shape_strategy(), seed in 0u64..1000) {
        let last = *shape.last().unwrap();
        // two-element rows normalize to +-1 and have a vanishing gradient
        prop_assume!(last >= 3);
        let x = rand_t(&shape, seed);
        let gamma = rand_t(&[last], seed + 1);
        let beta = rand_t(&[last], seed + 2);
        check(|g, v| { let s = g.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(g, s, seed) }, &[x, gamma, beta], 1e-5);
    }
}

#[test]
fn matmul_and_linear_grads() {
    let a = rand_t(&[2, 3, 4], 1);
    let b = rand_t(&[4, 5], 2);
    check(|g, v| { let s = g.matmul(v[0], v[1])?; probe(g, s, 3) }, &[a.clone(), b.clone()], 1e-6);
    let bb = rand_t(&[2, 4, 5], 4);
    check(|g, v| { let s = g.matmul(v[0], v[1])?; probe(g, s, 3) }, &[a.clone(), bb], 1e-6);
    let bias = rand_t(&[5], 5);
    check(|g, v| { let s = g.linear(v[0], v[1], Some(v[2]))?; probe(g, s, 6) }, &[a, b, bias], 1e-6);
}

#[test]
fn conv_and_pool_grads() {
    let x = rand_t(&[2, 7, 6, 3], 1);
    let w = rand_t(&[3, 3, 3, 4], 2);
    let b = rand_t(&[4], 3);
    check(
        |g, v| {
            let s = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, s, 4)
        },
        &[x.clone(), w, b],
        1e-5,
    );
    check(|g, v| { let s = g.avg_pool2d(v[0], 3)?; probe(g, s, 5) }, &[x], 1e-5);
}

#[test]
fn gather_concat_and_loss_grads() {
    let x = rand_t(&[3, 4], 1);
    let idx = vec![Some(0), Some(5), None, Some(5), Some(11), Some(2)];
    check(|g, v| { let s = g.gather(v[0], idx.clone(), &[2, 3])?; probe(g, s, 2) }, &[x.clone()], 1e-6);
    let y = rand_t(&[3, 2], 3);
    check(|g, v| { let s = g.concat_last(&[v[0], v[1]])?; probe(g, s, 4) }, &[x.clone(), y], 1e-6);
    check(|g, v| g.cross_entropy(v[0], &[3, 0, 1]), &[x], 1e-6);
}

#[test]
fn repeated_use_accumulates() {
    let x = rand_t(&[4, 4], 9);
    check(
        |g, v| {
            let a = g.matmul(v[0], v[0])?;
            let b = g.mul(a, v[0])?;
            probe(g, b, 1)
        },
        &[x],
        1e-6,
    );
}
