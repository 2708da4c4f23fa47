use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::{CategoryColumns, CtrMode, MetricModes, MetricsReport, PvrMode, TableSummary};

/// Business targets as relative deltas against baseline metrics: a bound
/// is `baseline * (1 + delta)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintTargets {
    pub ctr_min: Option<f64>,
    pub cpc_min: Option<f64>,
    pub cpc_max: Option<f64>,
    pub pvr_min: Option<f64>,
    pub pvr_max: Option<f64>,
    pub cvr_min: Option<f64>,
    pub cpa_min: Option<f64>,
    pub cpa_max: Option<f64>,
}

impl ConstraintTargets {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ctr_min,
            self.cpc_min,
            self.cpc_max,
            self.pvr_min,
            self.pvr_max,
            self.cvr_min,
            self.cpa_min,
            self.cpa_max,
        ];
        if all.iter().flatten().any(|d| !d.is_finite()) {
            return Err(Error::config("target deltas must be finite"));
        }
        for (name, lo, hi) in [
            ("cpc", self.cpc_min, self.cpc_max),
            ("pvr", self.pvr_min, self.pvr_max),
            ("cpa", self.cpa_min, self.cpa_max),
        ] {
            if let (Some(lo), Some(hi)) = (lo, hi) {
                if lo > hi {
                    return Err(Error::config(format!("{name} target min {lo} > max {hi}")));
                }
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("targets serialize");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// One category's slice of the decision vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub category: String,
    pub offset: usize,
    pub len: usize,
}

/// `coeffs . x + constant <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub name: String,
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl ConstraintRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.constant
    }
}

/// Minimize `-revenue . x + nu * sum x ln x` subject to the rows and one
/// probability simplex per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub blocks: Vec<Block>,
    pub revenue: Vec<f64>,
    pub rows: Vec<ConstraintRow>,
    pub nu: f64,
}

impl ProblemSpec {
    /// A problem over explicit per-block revenue coefficients and no rows.
    pub fn new(revenue_blocks: Vec<(String, Vec<f64>)>, nu: f64) -> Self {
        let mut blocks = Vec::new();
        let mut revenue = Vec::new();
        for (category, r) in revenue_blocks {
            blocks.push(Block {
                category,
                offset: revenue.len(),
                len: r.len(),
            });
            revenue.extend(r);
        }
        Self {
            blocks,
            revenue,
            rows: Vec::new(),
            nu,
        }
    }

    pub fn dim(&self) -> usize {
        self.revenue.len()
    }

    pub fn add_row(&mut self, name: impl Into<String>, coeffs: Vec<f64>, constant: f64) {
        assert_eq!(coeffs.len(), self.dim());
        self.rows.push(ConstraintRow {
            name: name.into(),
            coeffs,
            constant,
        });
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config("nu must be finite and >= 0"));
        }
        let mut end = 0;
        for b in &self.blocks {
            if b.offset != end || b.len == 0 {
                return Err(Error::config(format!("malformed block {}", b.category)));
            }
            end += b.len;
        }
        if end != self.dim() {
            return Err(Error::config("blocks do not cover the decision vector"));
        }
        let finite = self.revenue.iter().all(|v| v.is_finite())
            && self
                .rows
                .iter()
                .all(|r| r.constant.is_finite() && r.coeffs.len() == end && r.coeffs.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::config("non-finite or mis-sized coefficients"));
        }
        Ok(())
    }

    /// Splits a decision vector into per-category probability vectors.
    pub fn split(&self, x: &[f64]) -> BTreeMap<String, Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| (b.category.clone(), x[b.offset..b.offset + b.len].to_vec()))
            .collect()
    }

    pub fn revenue_of(&self, x: &[f64]) -> f64 {
        self.revenue.iter().zip(x).map(|(r, x)| r * x).sum()
    }
}

/// Turns each fractional target `N(x) / D(x)` in `[lo, hi]` into the linear
/// rows `N - hi D <= 0` and `lo D - N <= 0`; the denominators are strictly
/// positive on the simplex whenever some column has a nonzero entry.
///
/// Revenue coefficients are raw expected totals over the log. Each row is
/// divided by the baseline total of its numerator, so residuals read as
/// fractions of the baseline quantity.
pub fn build_problem(
    summary: &TableSummary,
    baseline: &MetricsReport,
    targets: &ConstraintTargets,
    nu: f64,
    modes: MetricModes,
) -> Result<ProblemSpec> {
    targets.validate()?;
    let n = summary.n_requests();
    if n == 0 {
        return Err(Error::config("coefficient table has no requests"));
    }
    let base = &baseline.totals;
    let mut problem = ProblemSpec::new(
        summary
            .categories
            .iter()
            .map(|c| (c.category.clone(), c.revenue.clone()))
            .collect(),
        nu,
    );

    let bound = |value: Option<f64>, metric: &'static str, delta: f64| -> Result<f64> {
        let v = value.ok_or(Error::ZeroDenominator { metric })?;
        Ok(v * (1.0 + delta))
    };
    let normalizer = |total: f64, metric: &'static str| -> Result<f64> {
        if total > 0.0 {
            Ok(total)
        } else {
            Err(Error::ZeroDenominator { metric })
        }
    };

    // coefficients over every (category, column), divided by `norm`
    let row = |norm: f64, f: &dyn Fn(&CategoryColumns, usize) -> f64| -> Vec<f64> {
        summary
            .categories
            .iter()
            .flat_map(|c| (0..c.k()).map(move |j| (c, j)))
            .map(|(c, j)| f(c, j) / norm)
            .collect()
    };

    if let Some(d) = targets.ctr_min {
        let norm = normalizer(base.clicks, "ctr")?;
        match modes.ctr {
            CtrMode::Ratio => {
                let lo = bound(baseline.ctr, "ctr", d)?;
                problem.add_row("ctr_min", row(norm, &|c, j| lo * c.impressions[j] - c.clicks[j]), 0.0);
            }
            CtrMode::RawSum => {
                let lo = base.clicks * (1.0 + d);
                problem.add_row("ctr_min", row(norm, &|c, j| -c.clicks[j]), lo / norm);
            }
        }
    }
    if targets.cpc_min.is_some() || targets.cpc_max.is_some() {
        let norm = normalizer(base.revenue, "cpc")?;
        if let Some(d) = targets.cpc_min {
            let lo = bound(baseline.cpc, "cpc", d)?;
            problem.add_row("cpc_min", row(norm, &|c, j| lo * c.clicks[j] - c.revenue[j]), 0.0);
        }
        if let Some(d) = targets.cpc_max {
            let hi = bound(baseline.cpc, "cpc", d)?;
            problem.add_row("cpc_max", row(norm, &|c, j| c.revenue[j] - hi * c.clicks[j]), 0.0);
        }
    }
    let coverage = |c: &CategoryColumns, j: usize| -> (f64, f64) {
        match modes.pvr {
            PvrMode::Requests => (c.has_ad[j], c.n_requests as f64),
            PvrMode::Slots => (c.impressions[j], c.total_slots as f64),
        }
    };
    if targets.pvr_min.is_some() || targets.pvr_max.is_some() {
        let covered = match modes.pvr {
            PvrMode::Requests => base.requests_with_ads,
            PvrMode::Slots => base.impressions,
        };
        let norm = normalizer(covered, "pvr")?;
        if let Some(d) = targets.pvr_min {
            let lo = bound(baseline.pvr, "pvr", d)?;
            problem.add_row(
                "pvr_min",
                row(norm, &|c, j| {
                    let (num, den) = coverage(c, j);
                    lo * den - num
                }),
                0.0,
            );
        }
        if let Some(d) = targets.pvr_max {
            let hi = bound(baseline.pvr, "pvr", d)?;
            problem.add_row(
                "pvr_max",
                row(norm, &|c, j| {
                    let (num, den) = coverage(c, j);
                    num - hi * den
                }),
                0.0,
            );
        }
    }
    if let Some(d) = targets.cvr_min {
        let lo = bound(baseline.cvr, "cvr", d)?;
        let norm = normalizer(base.conversions, "cvr")?;
        problem.add_row("cvr_min", row(norm, &|c, j| lo * c.clicks[j] - c.conversions[j]), 0.0);
    }
    if targets.cpa_min.is_some() || targets.cpa_max.is_some() {
        let norm = normalizer(base.revenue, "cpa")?;
        if let Some(d) = targets.cpa_min {
            let lo = bound(baseline.cpa, "cpa", d)?;
            problem.add_row("cpa_min", row(norm, &|c, j| lo * c.conversions[j] - c.revenue[j]), 0.0);
        }
        if let Some(d) = targets.cpa_max {
            let hi = bound(baseline.cpa, "cpa", d)?;
            problem.add_row("cpa_max", row(norm, &|c, j| c.revenue[j] - hi * c.conversions[j]), 0.0);
        }
    }
    problem.validate()?;
    Ok(problem)
}
