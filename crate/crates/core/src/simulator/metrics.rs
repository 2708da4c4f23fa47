use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::ParamGrid;
use super::table::{build_table_summary, TableSummary};
use crate::auction::{CategoryParams, CtrModel};
use crate::datagen::ReplayLog;
use crate::error::{Error, Result};

/// How the CTR target is expressed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrMode {
    /// Expected clicks / expected impressions.
    #[default]
    Ratio,
    /// Unnormalized expected clicks.
    RawSum,
}

/// Denominator of the PV coverage ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvrMode {
    /// Requests with at least one ad / all requests.
    #[default]
    Requests,
    /// Filled slots / available slots.
    Slots,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricModes {
    pub ctr: CtrMode,
    pub pvr: PvrMode,
}

/// Per-category probability vectors over grid instances.
pub trait Mixture {
    fn weights(&self, category: &str) -> Option<&[f64]>;
}

impl Mixture for BTreeMap<String, Vec<f64>> {
    fn weights(&self, category: &str) -> Option<&[f64]> {
        self.get(category).map(Vec::as_slice)
    }
}

/// The same one-hot vector on instance `j` for every category.
pub fn one_hot(summary: &TableSummary, j: usize) -> BTreeMap<String, Vec<f64>> {
    summary
        .categories
        .iter()
        .map(|c| {
            let mut v = vec![0.0; summary.k];
            v[j] = 1.0;
            (c.category.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTotals {
    pub requests: f64,
    pub available_slots: f64,
    pub impressions: f64,
    pub clicks: f64,
    pub revenue: f64,
    pub conversions: f64,
    pub requests_with_ads: f64,
}

impl MetricTotals {
    pub fn accumulate(&mut self, other: &MetricTotals) {
        self.scaled_add(1.0, other);
    }

    pub fn scaled_add(&mut self, w: f64, other: &MetricTotals) {
        self.requests += w * other.requests;
        self.available_slots += w * other.available_slots;
        self.impressions += w * other.impressions;
        self.clicks += w * other.clicks;
        self.revenue += w * other.revenue;
        self.conversions += w * other.conversions;
        self.requests_with_ads += w * other.requests_with_ads;
    }
}

/// Relative change `metric / baseline - 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub revenue: Option<f64>,
    pub ctr: Option<f64>,
    pub cpc: Option<f64>,
    pub pvr: Option<f64>,
    pub cvr: Option<f64>,
    pub cpa: Option<f64>,
    pub clicks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub totals: MetricTotals,
    pub pvr_mode: PvrMode,
    pub ctr: Option<f64>,
    pub cpc: Option<f64>,
    pub cvr: Option<f64>,
    pub cpa: Option<f64>,
    pub pvr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<MetricDeltas>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

fn rel(value: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (value, base) {
        (Some(v), Some(b)) if b != 0.0 => Some(v / b - 1.0),
        _ => None,
    }
}

impl MetricsReport {
    pub fn from_totals(totals: MetricTotals, pvr_mode: PvrMode) -> Self {
        let pvr = match pvr_mode {
            PvrMode::Requests => ratio(totals.requests_with_ads, totals.requests),
            PvrMode::Slots => ratio(totals.impressions, totals.available_slots),
        };
        Self {
            totals,
            pvr_mode,
            ctr: ratio(totals.clicks, totals.impressions),
            cpc: ratio(totals.revenue, totals.clicks),
            cvr: ratio(totals.conversions, totals.clicks),
            cpa: ratio(totals.revenue, totals.conversions),
            pvr,
            deltas: None,
        }
    }

    pub fn with_baseline(mut self, base: &MetricsReport) -> Self {
        self.deltas = Some(MetricDeltas {
            revenue: rel(Some(self.totals.revenue), Some(base.totals.revenue)),
            ctr: rel(self.ctr, base.ctr),
            cpc: rel(self.cpc, base.cpc),
            pvr: rel(self.pvr, base.pvr),
            cvr: rel(self.cvr, base.cvr),
            cpa: rel(self.cpa, base.cpa),
            clicks: rel(Some(self.totals.clicks), Some(base.totals.clicks)),
        });
        self
    }
}

/// Totals contributed by one category under weights `x`.
pub fn category_totals(cols: &super::table::CategoryColumns, x: &[f64]) -> MetricTotals {
    let mut t = MetricTotals {
        requests: cols.n_requests as f64,
        available_slots: cols.total_slots as f64,
        ..Default::default()
    };
    for (j, &w) in x.iter().enumerate() {
        t.impressions += w * cols.impressions[j];
        t.clicks += w * cols.clicks[j];
        t.revenue += w * cols.revenue[j];
        t.conversions += w * cols.conversions[j];
        t.requests_with_ads += w * cols.has_ad[j];
    }
    t
}

/// Expected business totals of a mixture policy; every total is linear in
/// the weights.
pub fn aggregate_metrics(
    summary: &TableSummary,
    mixture: &dyn Mixture,
    pvr_mode: PvrMode,
) -> Result<MetricsReport> {
    let mut totals = MetricTotals::default();
    for cols in &summary.categories {
        let x = mixture.weights(&cols.category).ok_or_else(|| {
            Error::DataIntegrity(format!("policy has no weights for category {}", cols.category))
        })?;
        if x.len() != summary.k {
            return Err(Error::DataIntegrity(format!(
                "policy for {} has {} weights, table has {}",
                cols.category,
                x.len(),
                summary.k
            )));
        }
        totals.scaled_add(1.0, &category_totals(cols, x));
    }
    Ok(MetricsReport::from_totals(totals, pvr_mode))
}

/// Metrics of running each category's center mechanism on `log`.
pub fn baseline_metrics(
    log: &ReplayLog,
    centers: &CategoryParams,
    model: &dyn CtrModel,
    pvr_mode: PvrMode,
) -> Result<MetricsReport> {
    let grid = ParamGrid::centers_only(centers.clone(), &log.categories())?;
    let summary = build_table_summary(log, &grid, model)?;
    aggregate_metrics(&summary, &one_hot(&summary, 0), pvr_mode)
}
