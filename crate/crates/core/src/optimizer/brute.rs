use super::problem::ProblemSpec;
use super::solver::{entropy_term, Solution, SolveStatus};
use crate::error::{Error, Result};

/// Grid points whose combined count above this is refused.
const MAX_COMBINATIONS: usize = 40_000_000;

/// Slack allowed when checking rows at grid points, absorbing rounding in
/// the row sums only.
const FEASIBILITY_SLACK: f64 = 1e-9;

/// Every vector of `k` non-negative multiples of `1/n` summing to one.
fn compositions(k: usize, n: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / n as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(left - c, slots - 1, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, n, &mut Vec::with_capacity(k), &mut out);
    out
}

struct BlockPoints {
    points: Vec<Vec<f64>>,
    /// Per point: revenue contribution, entropy contribution, then one
    /// entry per row.
    contrib: Vec<f64>,
    stride: usize,
}

fn block_points(problem: &ProblemSpec, b: usize, n: usize) -> BlockPoints {
    let block = &problem.blocks[b];
    let points = compositions(block.len, n);
    let stride = 2 + problem.rows.len();
    let mut contrib = Vec::with_capacity(points.len() * stride);
    for p in &points {
        let r = &problem.revenue[block.offset..block.offset + block.len];
        contrib.push(r.iter().zip(p).map(|(a, b)| a * b).sum());
        contrib.push(entropy_term(p));
        for row in &problem.rows {
            let a = &row.coeffs[block.offset..block.offset + block.len];
            contrib.push(a.iter().zip(p).map(|(a, b)| a * b).sum());
        }
    }
    BlockPoints {
        points,
        contrib,
        stride,
    }
}

/// Exhaustive search over the `grid_step` lattice of each category simplex.
/// Supports at most two categories of at most four instances each.
pub fn brute_force_solve(problem: &ProblemSpec, grid_step: f64) -> Result<Solution> {
    problem.validate()?;
    if problem.blocks.is_empty() || problem.blocks.len() > 2 || problem.blocks.iter().any(|b| b.len > 4) {
        return Err(Error::config("brute force needs 1-2 categories of at most 4 instances"));
    }
    let n = (1.0 / grid_step).round();
    if !(grid_step > 0.0) || n < 1.0 || ((n * grid_step) - 1.0).abs() > 1e-9 {
        return Err(Error::config("grid_step must divide 1"));
    }
    let n = n as usize;
    let blocks: Vec<BlockPoints> = (0..problem.blocks.len()).map(|b| block_points(problem, b, n)).collect();
    let combos = blocks.iter().map(|b| b.points.len()).product::<usize>();
    if combos > MAX_COMBINATIONS {
        return Err(Error::config(format!("{combos} grid combinations is too many")));
    }
    let nr = problem.rows.len();
    let nu = problem.nu;
    let mut best: Option<(f64, usize, usize)> = None;
    let single = blocks.len() == 1;
    let n_second = if single { 1 } else { blocks[1].points.len() };
    let mut consider = |a: usize, b: usize| {
        let ca = &blocks[0].contrib[a * blocks[0].stride..(a + 1) * blocks[0].stride];
        let cb = (!single).then(|| &blocks[1].contrib[b * blocks[1].stride..(b + 1) * blocks[1].stride]);
        let at = |i: usize| ca[i] + cb.map_or(0.0, |c| c[i]);
        for k in 0..nr {
            if at(2 + k) + problem.rows[k].constant > FEASIBILITY_SLACK {
                return;
            }
        }
        let obj = -at(0) + if nu > 0.0 { nu * at(1) } else { 0.0 };
        if best.is_none_or(|(o, _, _)| obj < o) {
            best = Some((obj, a, b));
        }
    };
    for a in 0..blocks[0].points.len() {
        for b in 0..n_second {
            consider(a, b);
        }
    }
    let (status, objective, x) = match best {
        Some((obj, a, b)) => {
            let mut x = blocks[0].points[a].clone();
            if !single {
                x.extend_from_slice(&blocks[1].points[b]);
            }
            (SolveStatus::Optimal, obj, x)
        }
        None => {
            let x: Vec<f64> = problem
                .blocks
                .iter()
                .flat_map(|b| std::iter::repeat_n(1.0 / b.len as f64, b.len))
                .collect();
            (SolveStatus::Infeasible, super::solver::objective_value(problem, &x), x)
        }
    };
    Ok(Solution {
        revenue: problem.revenue_of(&x),
        residuals: problem.rows.iter().map(|r| r.eval(&x)).collect(),
        duals: vec![0.0; nr],
        x,
        status,
        objective,
        outer_iterations: 0,
        inner_iterations: combos,
        penalty: 0.0,
        stationarity: 0.0,
        trace: Vec::new(),
    })
}
