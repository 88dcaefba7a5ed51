//! Grouped attention against one global group on growing square grids.

use std::time::Instant;

use crossformer_core::init::{rng, uniform};
use crossformer_core::lsda::{attention_core, group_graph, GroupLayout, GroupMode};
use crossformer_core::{Error, Graph, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub lsda_macs: u64,
    pub full_macs: u64,
    pub lsda_secs: f64,
    pub full_secs: f64,
}

/// `softmax(QKᵀ)V` over the groups of `layout`, with `Q = K = V = x`.
/// Returns the multiply-accumulates of the two matmuls.
fn grouped_core(x: &Tensor<f32>, layout: &GroupLayout, heads: usize) -> Result<u64> {
    let d = *x.shape().last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} is not divisible by {heads} heads")));
    }
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let grouped = group_graph(&mut g, xv, layout)?;
    let [b, groups, n, _] = *g.shape(grouped) else {
        unreachable!("grouping yields [B, groups, N, D]")
    };
    let split = g.reshape(grouped, &[b, groups, n, heads, d / heads])?;
    let q = g.permute(split, &[0, 1, 3, 2, 4])?;
    let k_t = g.permute(split, &[0, 1, 3, 4, 2])?;
    let mask = layout.is_padded().then(|| g.constant(layout.key_mask()));
    let before = g.macs();
    attention_core(&mut g, q, k_t, q, None, mask)?;
    Ok(g.macs() - before)
}

fn timed(repeats: usize, mut f: impl FnMut() -> Result<u64>) -> Result<(u64, f64)> {
    let mut best = f64::INFINITY;
    let mut macs = 0;
    for _ in 0..repeats {
        let t = Instant::now();
        macs = f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok((macs, best))
}

/// One row per size: SDA grouping with `group`, and a single group holding
/// the whole grid.
pub fn run_bench(sizes: &[usize], group: usize, dim: usize, heads: usize, seed: u64, repeats: usize) -> Result<Vec<BenchRow>> {
    let mut r = rng(seed);
    sizes
        .iter()
        .map(|&s| {
            let x = uniform::<f32, _>(&mut r, &[1, s, s, dim], -1.0, 1.0);
            let lsda = GroupLayout::new(GroupMode::Sda, s, s, group)?;
            let full = GroupLayout::new(GroupMode::Sda, s, s, s)?;
            let (lsda_macs, lsda_secs) = timed(repeats, || grouped_core(&x, &lsda, heads))?;
            let (full_macs, full_secs) = timed(repeats, || grouped_core(&x, &full, heads))?;
            Ok(BenchRow {
                size: s,
                lsda_macs,
                full_macs,
                lsda_secs,
                full_secs,
            })
        })
        .collect()
}

/// Checks that between consecutive rows whose sizes are multiples of
/// `group`, grouped cost grows with the square of the size ratio and full
/// cost with its fourth power, exactly.
pub fn check_scaling(rows: &[BenchRow], group: usize) -> core::result::Result<(), String> {
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.size % group != 0 || b.size % group != 0 {
            continue;
        }
        let (sa, sb) = (a.size as u128, b.size as u128);
        if b.lsda_macs as u128 * sa * sa != a.lsda_macs as u128 * sb * sb {
            return Err(format!(
                "grouped MACs {} -> {} for S {} -> {} are not quadratic",
                a.lsda_macs, b.lsda_macs, a.size, b.size
            ));
        }
        if b.full_macs as u128 * sa.pow(4) != a.full_macs as u128 * sb.pow(4) {
            return Err(format!(
                "full MACs {} -> {} for S {} -> {} are not quartic",
                a.full_macs, b.full_macs, a.size, b.size
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_at_g7() {
        let rows = run_bench(&[14, 28], 7, 8, 2, 0, 1).unwrap();
        assert_eq!(rows[1].lsda_macs, 4 * rows[0].lsda_macs);
        assert_eq!(rows[1].full_macs, 16 * rows[0].full_macs);
        assert_eq!(rows[0].full_macs, 2 * 196 * 196 * 8);
        check_scaling(&rows, 7).unwrap();
    }

    #[test]
    fn one_group_is_full_attention() {
        let rows = run_bench(&[7], 7, 4, 1, 0, 1).unwrap();
        assert_eq!(rows[0].lsda_macs, rows[0].full_macs);
    }

    #[test]
    fn broken_scaling_is_reported() {
        let mut rows = run_bench(&[7, 14], 7, 4, 1, 0, 1).unwrap();
        rows[1].lsda_macs += 1;
        assert!(check_scaling(&rows, 7).is_err());
    }
}
