use serde::{Deserialize, Serialize};

use super::problem::ProblemSpec;
use super::simplex::{project_simplex_in_place, project_simplex_scaled};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// The penalty grows unless the violation shrinks below this fraction
    /// of its previous value.
    pub violation_ratio: f64,
    pub tolerance: f64,
    pub max_inner_iterations: usize,
    pub backtrack_shrink: f64,
    pub sufficient_decrease: f64,
    pub entropy_clamp: f64,
    pub max_outer_iterations: usize,
    pub max_penalty: f64,
    /// Keep the merit value after every accepted inner step.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            violation_ratio: 0.25,
            tolerance: 1e-6,
            max_inner_iterations: 2000,
            backtrack_shrink: 0.5,
            sufficient_decrease: 1e-4,
            entropy_clamp: 1e-12,
            max_outer_iterations: 50,
            max_penalty: 1e8,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_penalty,
            self.tolerance,
            self.entropy_clamp,
            self.max_penalty,
            self.sufficient_decrease,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.penalty_growth > 1.0)
            || !(self.violation_ratio > 0.0 && self.violation_ratio < 1.0)
            || !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0)
            || self.sufficient_decrease >= 1.0
            || self.max_inner_iterations == 0
            || self.max_outer_iterations == 0
            || self.max_penalty < self.initial_penalty
        {
            return Err(Error::config("invalid solver configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    /// `-revenue . x + nu * sum x ln x`.
    pub objective: f64,
    pub revenue: f64,
    /// `g_k(x)` per constraint row; positive means violated.
    pub residuals: Vec<f64>,
    pub duals: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub penalty: f64,
    pub stationarity: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

/// Plain entropy, `0 ln 0 = 0`.
pub fn entropy_term(x: &[f64]) -> f64 {
    x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Shannon entropy of a policy vector.
pub fn entropy(x: &[f64]) -> f64 {
    // + 0.0 turns the -0.0 of a point mass into 0.0
    0.0 - entropy_term(x)
}

pub fn objective_value(problem: &ProblemSpec, x: &[f64]) -> f64 {
    let reg = if problem.nu > 0.0 { problem.nu * entropy_term(x) } else { 0.0 };
    -problem.revenue_of(x) + reg
}

struct Merit<'a> {
    p: &'a ProblemSpec,
    eps: f64,
    ln_eps: f64,
}

impl Merit<'_> {
    /// `x ln x` for `x >= eps`, continued linearly below.
    fn phi(&self, x: f64) -> f64 {
        if x >= self.eps {
            x * x.ln()
        } else {
            self.eps * self.ln_eps + (self.ln_eps + 1.0) * (x - self.eps)
        }
    }

    fn rows(&self, x: &[f64], g: &mut [f64]) {
        for (gk, row) in g.iter_mut().zip(&self.p.rows) {
            *gk = row.eval(x);
        }
    }

    /// Augmented Lagrangian in the shifted-penalty form
    /// `f + sum (max(0, l + mu g)^2 - l^2) / (2 mu)`; fills `g`.
    fn value(&self, x: &[f64], lambda: &[f64], mu: f64, g: &mut [f64]) -> f64 {
        self.rows(x, g);
        let mut v = -self.p.revenue_of(x);
        if self.p.nu > 0.0 {
            v += self.p.nu * x.iter().map(|&xi| self.phi(xi)).sum::<f64>();
        }
        for (&gk, &lk) in g.iter().zip(lambda) {
            let s = (lk + mu * gk).max(0.0);
            v += (s * s - lk * lk) / (2.0 * mu);
        }
        v
    }

    /// `value(x + dx) - value(x)` evaluated term by term from `dx`, so
    /// decreases far below the merit's rounding unit stay visible to the
    /// line search. `g` holds the rows at `x`.
    fn delta(&self, x: &[f64], dx: &[f64], lambda: &[f64], mu: f64, g: &[f64]) -> f64 {
        let mut v = -self.p.revenue.iter().zip(dx).map(|(r, d)| r * d).sum::<f64>();
        if self.p.nu > 0.0 {
            let mut h = 0.0;
            for (&xi, &di) in x.iter().zip(dx) {
                let t = xi + di;
                h += if xi >= self.eps && t >= self.eps {
                    di * t.ln() + xi * (di / xi).ln_1p()
                } else {
                    self.phi(t) - self.phi(xi)
                };
            }
            v += self.p.nu * h;
        }
        for ((row, &gk), &lk) in self.p.rows.iter().zip(g).zip(lambda) {
            let dg: f64 = row.coeffs.iter().zip(dx).map(|(a, d)| a * d).sum();
            let s0 = (lk + mu * gk).max(0.0);
            let s1 = (lk + mu * (gk + dg)).max(0.0);
            v += (s1 - s0) * (s1 + s0) / (2.0 * mu);
        }
        v
    }

    fn gradient(&self, x: &[f64], lambda: &[f64], mu: f64, g: &[f64], out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(&self.p.revenue) {
            *o = -r;
        }
        if self.p.nu > 0.0 {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o += self.p.nu * (xi.max(self.eps).ln() + 1.0);
            }
        }
        for ((row, &gk), &lk) in self.p.rows.iter().zip(g).zip(lambda) {
            let s = (lk + mu * gk).max(0.0);
            if s > 0.0 {
                for (o, a) in out.iter_mut().zip(&row.coeffs) {
                    *o += s * a;
                }
            }
        }
    }

    /// Diagonal of the merit Hessian (entropy curvature plus active
    /// penalty rows), floored so every entry is positive.
    fn metric(&self, x: &[f64], lambda: &[f64], mu: f64, g: &[f64], d: &mut [f64]) {
        if self.p.nu > 0.0 {
            for (dj, &xi) in d.iter_mut().zip(x) {
                *dj = self.p.nu / xi.max(self.eps);
            }
        } else {
            d.fill(0.0);
        }
        for ((row, &gk), &lk) in self.p.rows.iter().zip(g).zip(lambda) {
            if lk + mu * gk > 0.0 {
                for (dj, a) in d.iter_mut().zip(&row.coeffs) {
                    *dj += mu * a * a;
                }
            }
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let floor = if mean > 0.0 { 1e-6 * mean } else { 1.0 };
        for dj in d.iter_mut() {
            *dj += floor;
        }
    }

    fn project_scaled(&self, v: &mut [f64], d: &[f64], order: &mut Vec<usize>) {
        for b in &self.p.blocks {
            let r = b.offset..b.offset + b.len;
            project_simplex_scaled(&mut v[r.clone()], &d[r], order);
        }
    }

    /// `dir . grad` with each block's gradient centered: `dir` sums to zero
    /// per block up to rounding, and that rounding times a large common
    /// gradient component would otherwise swamp tiny steps.
    fn slope(&self, dir: &[f64], grad: &[f64]) -> f64 {
        let mut total = 0.0;
        for b in &self.p.blocks {
            let r = b.offset..b.offset + b.len;
            let mean = grad[r.clone()].iter().sum::<f64>() / b.len as f64;
            total += dir[r.clone()].iter().zip(&grad[r]).map(|(d, gi)| d * (gi - mean)).sum::<f64>();
        }
        total
    }

    fn project(&self, x: &mut [f64]) {
        for b in &self.p.blocks {
            project_simplex_in_place(&mut x[b.offset..b.offset + b.len]);
        }
    }

    /// `||P(x - grad) - x||_inf`.
    fn stationarity(&self, x: &[f64], grad: &[f64], buf: &mut [f64]) -> f64 {
        for ((b, xi), gi) in buf.iter_mut().zip(x).zip(grad) {
            *b = xi - gi;
        }
        self.project(buf);
        buf.iter().zip(x).map(|(p, xi)| (p - xi).abs()).fold(0.0, f64::max)
    }
}

struct InnerResult {
    iterations: usize,
    stationarity: f64,
}

const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;

/// Scratch space for the Newton direction.
struct NewtonWork {
    w: Vec<f64>,
    free: Vec<bool>,
    active: Vec<usize>,
}

impl Merit<'_> {
    /// Projected Newton direction over the free coordinates: minimizes the
    /// second-order model with the exact Hessian (diagonal entropy part plus
    /// one rank-one term per active row) subject to zero change in each
    /// block's sum. The block constraints eliminate in closed form, leaving
    /// an `r x r` system in the active rows. Coordinates near zero that the
    /// gradient step `pg` would not raise stay fixed.
    #[allow(clippy::too_many_arguments)]
    fn newton_direction(
        &self,
        x: &[f64],
        grad: &[f64],
        lambda: &[f64],
        mu: f64,
        g: &[f64],
        pg: &[f64],
        fix_below: f64,
        ws: &mut NewtonWork,
        out: &mut [f64],
    ) -> bool {
        let nu = self.p.nu;
        ws.active.clear();
        ws.active.extend((0..lambda.len()).filter(|&k| lambda[k] + mu * g[k] > 0.0));
        let mut mean_w = 0.0;
        for (j, &xi) in x.iter().enumerate() {
            ws.free[j] = xi > fix_below || pg[j] > 0.0;
            ws.w[j] = if nu > 0.0 { nu / xi.max(self.eps) } else { 0.0 };
            mean_w += ws.w[j];
        }
        let floor = 1e-9 * (1.0 + mean_w / x.len() as f64);
        for (wj, &f) in ws.w.iter_mut().zip(&ws.free) {
            *wj = if f { 1.0 / (*wj + floor) } else { 0.0 };
        }
        let r = ws.active.len();
        let su = mu.sqrt();
        let u = |k: usize, j: usize| su * self.p.rows[ws.active[k]].coeffs[j];
        let mut c = nalgebra::DMatrix::<f64>::identity(r, r);
        let mut rhs = nalgebra::DVector::<f64>::zeros(r);
        let mut mu_b = vec![0.0; r];
        for b in &self.p.blocks {
            let range = b.offset..b.offset + b.len;
            let wsum: f64 = ws.w[range.clone()].iter().sum();
            if wsum <= 0.0 {
                return false;
            }
            let gbar = range.clone().map(|j| ws.w[j] * grad[j]).sum::<f64>() / wsum;
            for (k, m) in mu_b.iter_mut().enumerate() {
                *m = range.clone().map(|j| ws.w[j] * u(k, j)).sum::<f64>() / wsum;
            }
            for j in range.clone() {
                let wj = ws.w[j];
                if wj == 0.0 {
                    continue;
                }
                for k in 0..r {
                    let uk = u(k, j) - mu_b[k];
                    rhs[k] -= wj * uk * (grad[j] - gbar);
                    for l in 0..=k {
                        c[(k, l)] += wj * uk * (u(l, j) - mu_b[l]);
                    }
                }
            }
        }
        for k in 0..r {
            for l in 0..k {
                c[(l, k)] = c[(k, l)];
            }
        }
        let zeta = match c.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => return false,
        };
        for b in &self.p.blocks {
            let range = b.offset..b.offset + b.len;
            let wsum: f64 = ws.w[range.clone()].iter().sum();
            let mut hbar = 0.0;
            for j in range.clone() {
                let h = grad[j] + (0..r).map(|k| u(k, j) * zeta[k]).sum::<f64>();
                out[j] = h;
                hbar += ws.w[j] * h;
            }
            hbar /= wsum;
            for j in range {
                out[j] = -ws.w[j] * (out[j] - hbar);
            }
        }
        out.iter().all(|v| v.is_finite())
    }
}

/// Monotone Armijo search along `x + s dir` for `s <= s0`; returns the
/// accepted merit change with `trial` and `g_trial` filled in.
#[allow(clippy::too_many_arguments)]
fn armijo(
    m: &Merit<'_>,
    cfg: &SolverConfig,
    x: &[f64],
    dir: &[f64],
    s0: f64,
    slope: f64,
    lambda: &[f64],
    mu: f64,
    g: &[f64],
    trial: &mut [f64],
    step_dx: &mut [f64],
    g_trial: &mut [f64],
) -> std::result::Result<Option<f64>, &'static str> {
    let mut s = s0;
    while s >= 1e-20 {
        for (((t, dx), xi), d) in trial.iter_mut().zip(step_dx.iter_mut()).zip(x).zip(dir) {
            *t = (xi + s * d).max(0.0);
            *dx = *t - xi;
        }
        let df = m.delta(x, step_dx, lambda, mu, g);
        if !df.is_finite() {
            return Err("non-finite merit in line search");
        }
        if df <= cfg.sufficient_decrease * s * slope {
            m.rows(trial, g_trial);
            return Ok(Some(df));
        }
        s *= cfg.backtrack_shrink;
    }
    Ok(None)
}

/// Inner minimization of the merit over the product of simplices. Each
/// iteration tries a projected Newton step on the free coordinates, cut
/// back to stay nonnegative, and falls back to a spectral projected
/// gradient step `P_D(x - t D^-1 grad) - x` in the diagonal curvature
/// metric `D`. Both are accepted only under monotone Armijo decrease.
/// Without curvature information the entropy term (`nu / x` spans many
/// orders of magnitude) and the penalty rows make plain gradient steps
/// stall.
#[allow(clippy::too_many_arguments)]
fn inner_solve(
    m: &Merit<'_>,
    cfg: &SolverConfig,
    x: &mut [f64],
    lambda: &[f64],
    mu: f64,
    tol: f64,
    step: &mut f64,
    outer: usize,
    trace: &mut Vec<f64>,
) -> Result<InnerResult> {
    let n = x.len();
    let nr = lambda.len();
    let mut g = vec![0.0; nr];
    let mut g_trial = vec![0.0; nr];
    let mut grad = vec![0.0; n];
    let mut grad_trial = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut ndir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut step_dx = vec![0.0; n];
    let mut order = Vec::new();
    let mut ws = NewtonWork {
        w: vec![0.0; n],
        free: vec![false; n],
        active: Vec::new(),
    };

    let mut f = m.value(x, lambda, mu, &mut g);
    m.gradient(x, lambda, mu, &g, &mut grad);
    let numeric = |inner: usize, what: &str| Error::Numeric {
        outer,
        inner,
        message: what.to_string(),
    };
    if !f.is_finite() {
        return Err(numeric(0, "non-finite merit at start of inner solve"));
    }
    let mut stat = m.stationarity(x, &grad, &mut buf);
    for it in 0..cfg.max_inner_iterations {
        if stat <= tol {
            return Ok(InnerResult {
                iterations: it,
                stationarity: stat,
            });
        }
        m.metric(x, lambda, mu, &g, &mut d);
        for (((v, xi), gi), dj) in dir.iter_mut().zip(x.iter()).zip(&grad).zip(&d) {
            *v = xi - *step * gi / dj;
        }
        m.project_scaled(&mut dir, &d, &mut order);
        for (v, xi) in dir.iter_mut().zip(x.iter()) {
            *v -= xi;
        }

        let mut accepted = None;
        // without entropy the model is flat off the penalty rows and the
        // truncated Newton steps only crawl between vertices
        if m.p.nu > 0.0
            && m.newton_direction(x, &grad, lambda, mu, &g, &dir, stat.min(1e-6), &mut ws, &mut ndir) {
            let slope = m.slope(&ndir, &grad);
            if slope < 0.0 {
                // longest step keeping every coordinate nonnegative
                let s_max = x
                    .iter()
                    .zip(&ndir)
                    .filter(|(_, &p)| p < 0.0)
                    .map(|(&xi, &p)| xi / -p)
                    .fold(f64::INFINITY, f64::min);
                if s_max > 1e-16 {
                    let s0 = s_max.min(1.0);
                    accepted = armijo(m, cfg, x, &ndir, s0, slope, lambda, mu, &g, &mut trial, &mut step_dx, &mut g_trial)
                        .map_err(|e| numeric(it, e))?;
                }
            }
        }
        if accepted.is_none() {
            let slope = m.slope(&dir, &grad);
            if !(slope < 0.0) {
                log::trace!("inner {it}: null direction, slope {slope:e}, stat {stat:e}");
                // projected step is numerically null; nothing left to gain
                return Ok(InnerResult {
                    iterations: it,
                    stationarity: stat,
                });
            }
            accepted = armijo(m, cfg, x, &dir, 1.0, slope, lambda, mu, &g, &mut trial, &mut step_dx, &mut g_trial)
                .map_err(|e| numeric(it, e))?;
        }
        let Some(df) = accepted else {
            log::trace!("inner {it}: line search failed, stat {stat:e}");
            return Ok(InnerResult {
                iterations: it,
                stationarity: stat,
            });
        };
        m.gradient(&trial, lambda, mu, &g_trial, &mut grad_trial);
        let mut sty = 0.0;
        let mut sts = 0.0;
        for i in 0..n {
            let sk = trial[i] - x[i];
            sty += sk * (grad_trial[i] - grad[i]);
            sts += d[i] * sk * sk;
        }
        *step = if sty > 0.0 { (sts / sty).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX };
        x.copy_from_slice(&trial);
        std::mem::swap(&mut grad, &mut grad_trial);
        std::mem::swap(&mut g, &mut g_trial);
        f += df;
        if cfg.record_trace {
            trace.push(f);
        }
        stat = m.stationarity(x, &grad, &mut buf);
    }
    Ok(InnerResult {
        iterations: cfg.max_inner_iterations,
        stationarity: stat,
    })
}

/// Augmented Lagrangian outer loop over the constraint rows, starting at
/// the uniform policy.
/// Violation ratio between consecutive solves at the penalty cap above which
/// the problem is declared infeasible.
const STALL_RATIO: f64 = 0.9;

pub fn solve(problem: &ProblemSpec, cfg: &SolverConfig) -> Result<Solution> {
    problem.validate()?;
    cfg.validate()?;
    // Work on the objective divided by its largest coefficient: same
    // minimizer, but stationarity and the tolerances become relative to the
    // revenue scale of the log. Duals are mapped back on exit.
    let scale = problem.revenue.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut scaled = problem.clone();
    scaled.revenue.iter_mut().for_each(|r| *r /= scale);
    scaled.nu /= scale;
    let m = Merit {
        p: &scaled,
        eps: cfg.entropy_clamp,
        ln_eps: cfg.entropy_clamp.ln(),
    };
    let mut x = vec![0.0; problem.dim()];
    for b in &problem.blocks {
        x[b.offset..b.offset + b.len].fill(1.0 / b.len as f64);
    }
    let nr = problem.rows.len();
    let mut lambda = vec![0.0; nr];
    let mut mu = cfg.initial_penalty;
    let mut g = vec![0.0; nr];
    let mut step = 1.0;
    let mut trace = Vec::new();
    let mut inner_total = 0;
    let mut prev_measure = f64::INFINITY;
    let mut prev_violation = f64::INFINITY;
    let mut status = SolveStatus::MaxIterations;
    let mut outer = 0;
    let mut stationarity = f64::INFINITY;

    while outer < cfg.max_outer_iterations {
        outer += 1;
        // inexact early subproblems; tightens as the multipliers settle
        let inner_tol = (0.1 * prev_measure).clamp(cfg.tolerance, 1e-2);
        let r = inner_solve(&m, cfg, &mut x, &lambda, mu, inner_tol, &mut step, outer, &mut trace)?;
        inner_total += r.iterations;
        stationarity = r.stationarity;
        m.rows(&x, &mut g);
        let violation = g.iter().fold(0.0f64, |a, &gk| a.max(gk));
        // also tracks complementarity of inactive rows
        let measure = g
            .iter()
            .zip(&lambda)
            .fold(0.0f64, |a, (&gk, &lk)| a.max(gk.max(-lk / mu).abs()));
        for (lk, &gk) in lambda.iter_mut().zip(&g) {
            *lk = (*lk + mu * gk).max(0.0);
        }
        log::debug!(
            "outer {outer}: mu={mu:.1e} violation={violation:.3e} measure={measure:.3e} stationarity={stationarity:.3e}"
        );
        if violation <= cfg.tolerance && measure <= cfg.tolerance && stationarity <= cfg.tolerance {
            status = SolveStatus::Optimal;
            break;
        }
        // at the penalty cap, give up only once the violation stops shrinking
        let at_cap = mu >= cfg.max_penalty;
        if at_cap && violation > cfg.tolerance && violation > STALL_RATIO * prev_violation {
            status = SolveStatus::Infeasible;
            break;
        }
        if measure > cfg.tolerance && measure > cfg.violation_ratio * prev_measure {
            mu = (mu * cfg.penalty_growth).min(cfg.max_penalty);
        }
        prev_measure = measure;
        prev_violation = if at_cap { violation } else { f64::INFINITY };
    }

    m.rows(&x, &mut g);
    Ok(Solution {
        objective: objective_value(problem, &x),
        revenue: problem.revenue_of(&x),
        residuals: g,
        duals: lambda.iter().map(|l| l * scale).collect(),
        x,
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        penalty: mu,
        stationarity,
        trace,
    })
}
