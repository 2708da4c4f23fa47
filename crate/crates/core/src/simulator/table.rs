use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{GridSpec, ParamGrid};
use crate::auction::{run_totals, AuctionScratch, CtrModel, MechanismParams, PreparedRequest};
use crate::datagen::{ReplayLog, ReplayRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub request_id: String,
    /// Index into [`CoefficientTable::categories`].
    pub category: u32,
    pub n_slots: u32,
}

/// Dense per-(request, instance) replay outcomes. Arrays are request-major:
/// entry `(i, j)` lives at `i * k + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub grid: GridSpec,
    pub k: usize,
    pub categories: Vec<String>,
    pub requests: Vec<RequestMeta>,
    /// Expected clicks.
    pub clicks: Vec<f64>,
    /// Expected revenue, sum of ctr * price.
    pub revenue: Vec<f64>,
    /// Expected conversions, sum of ctr * cvr.
    pub conversions: Vec<f64>,
    pub filled_slots: Vec<u16>,
}

/// Per-category column sums: the only form the optimizer and the metrics
/// need, since every business total is linear in the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryColumns {
    pub category: String,
    pub n_requests: u64,
    pub total_slots: u64,
    pub clicks: Vec<f64>,
    pub revenue: Vec<f64>,
    pub conversions: Vec<f64>,
    /// Number of requests showing at least one ad.
    pub has_ad: Vec<f64>,
    /// Expected impressions (filled slots).
    pub impressions: Vec<f64>,
}

impl CategoryColumns {
    fn zeros(category: String, k: usize) -> Self {
        Self {
            category,
            n_requests: 0,
            total_slots: 0,
            clicks: vec![0.0; k],
            revenue: vec![0.0; k],
            conversions: vec![0.0; k],
            has_ad: vec![0.0; k],
            impressions: vec![0.0; k],
        }
    }

    fn add_row(&mut self, n_slots: u32, row: RowRef<'_>) {
        self.n_requests += 1;
        self.total_slots += u64::from(n_slots);
        for j in 0..self.clicks.len() {
            self.clicks[j] += row.clicks[j];
            self.revenue[j] += row.revenue[j];
            self.conversions[j] += row.conversions[j];
            let f = row.filled[j];
            self.has_ad[j] += if f > 0 { 1.0 } else { 0.0 };
            self.impressions[j] += f64::from(f);
        }
    }

    fn merge(&mut self, other: &CategoryColumns) {
        self.n_requests += other.n_requests;
        self.total_slots += other.total_slots;
        for j in 0..self.clicks.len() {
            self.clicks[j] += other.clicks[j];
            self.revenue[j] += other.revenue[j];
            self.conversions[j] += other.conversions[j];
            self.has_ad[j] += other.has_ad[j];
            self.impressions[j] += other.impressions[j];
        }
    }

    pub fn k(&self) -> usize {
        self.clicks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub grid: GridSpec,
    pub k: usize,
    /// Sorted by category id.
    pub categories: Vec<CategoryColumns>,
}

impl TableSummary {
    pub fn category(&self, name: &str) -> Option<&CategoryColumns> {
        self.categories.iter().find(|c| c.category == name)
    }

    pub fn n_requests(&self) -> u64 {
        self.categories.iter().map(|c| c.n_requests).sum()
    }
}

#[derive(Clone, Copy)]
struct RowRef<'a> {
    clicks: &'a [f64],
    revenue: &'a [f64],
    conversions: &'a [f64],
    filled: &'a [u16],
}

#[derive(Debug, Clone)]
struct Row {
    clicks: Vec<f64>,
    revenue: Vec<f64>,
    conversions: Vec<f64>,
    filled: Vec<u16>,
}

impl Row {
    fn as_ref(&self) -> RowRef<'_> {
        RowRef {
            clicks: &self.clicks,
            revenue: &self.revenue,
            conversions: &self.conversions,
            filled: &self.filled,
        }
    }
}

fn simulate_row(
    record: &ReplayRecord,
    instances: &[MechanismParams],
    model: &dyn CtrModel,
    scratch: &mut AuctionScratch,
) -> Row {
    let prepared = PreparedRequest::new(record, model);
    let k = instances.len();
    let mut row = Row {
        clicks: Vec::with_capacity(k),
        revenue: Vec::with_capacity(k),
        conversions: Vec::with_capacity(k),
        filled: Vec::with_capacity(k),
    };
    for params in instances {
        let t = run_totals(params, record, &prepared, scratch);
        row.clicks.push(t.clicks);
        row.revenue.push(t.revenue);
        row.conversions.push(t.conversions);
        row.filled.push(t.filled_slots.min(u32::from(u16::MAX)) as u16);
    }
    row
}

fn check_categories(log: &ReplayLog, grid: &ParamGrid) -> Result<()> {
    let missing: BTreeSet<&str> = log
        .records
        .iter()
        .filter(|r| grid.instances(&r.category).is_none())
        .map(|r| r.category.as_str())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownCategory(missing.into_iter().map(String::from).collect()))
    }
}

/// Requests are summed in fixed-size chunks ordered by request id, and the
/// chunk partials are folded in order; results are therefore independent
/// of thread count and of the order of records in the log.
const SUM_CHUNK: usize = 512;
const CHUNKS_PER_BATCH: usize = 64;

fn id_order<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let ids: Vec<&str> = ids.collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
    order
}

fn fold_chunks<F>(
    order: &[usize],
    categories: &[String],
    k: usize,
    category_of: impl Fn(usize) -> usize + Sync,
    n_slots_of: impl Fn(usize) -> u32 + Sync,
    visit: F,
) -> Vec<CategoryColumns>
where
    F: Fn(usize, &mut AuctionScratch, &mut dyn FnMut(RowRef<'_>)) + Sync,
{
    let mut totals: Vec<CategoryColumns> = categories
        .iter()
        .map(|c| CategoryColumns::zeros(c.clone(), k))
        .collect();
    for batch in order.chunks(SUM_CHUNK * CHUNKS_PER_BATCH) {
        let partials: Vec<Vec<Option<CategoryColumns>>> = batch
            .par_chunks(SUM_CHUNK)
            .map(|chunk| {
                let mut scratch = AuctionScratch::default();
                let mut partial: Vec<Option<CategoryColumns>> = vec![None; categories.len()];
                for &i in chunk {
                    let c = category_of(i);
                    let slots = n_slots_of(i);
                    let acc = partial[c]
                        .get_or_insert_with(|| CategoryColumns::zeros(categories[c].clone(), k));
                    visit(i, &mut scratch, &mut |row| acc.add_row(slots, row));
                }
                partial
            })
            .collect();
        for partial in partials {
            for (total, p) in totals.iter_mut().zip(partial) {
                if let Some(p) = p {
                    total.merge(&p);
                }
            }
        }
    }
    totals
}

fn category_index(grid: &ParamGrid) -> (Vec<String>, BTreeMap<&str, usize>) {
    let names: Vec<String> = grid.categories().cloned().collect();
    let index = grid
        .categories()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    (names, index)
}

/// Replays every request under every grid instance of its category.
pub fn build_coefficient_table(
    log: &ReplayLog,
    grid: &ParamGrid,
    model: &dyn CtrModel,
) -> Result<CoefficientTable> {
    check_categories(log, grid)?;
    let (categories, index) = category_index(grid);
    let k = grid.k();
    let n = log.len();
    let mut table = CoefficientTable {
        grid: grid.spec.clone(),
        k,
        categories,
        requests: log
            .records
            .iter()
            .map(|r| RequestMeta {
                request_id: r.request_id.clone(),
                category: index[r.category.as_str()] as u32,
                n_slots: r.n_slots,
            })
            .collect(),
        clicks: vec![0.0; n * k],
        revenue: vec![0.0; n * k],
        conversions: vec![0.0; n * k],
        filled_slots: vec![0; n * k],
    };
    if k == 0 {
        return Ok(table);
    }
    table
        .clicks
        .par_chunks_mut(k)
        .zip(table.revenue.par_chunks_mut(k))
        .zip(table.conversions.par_chunks_mut(k))
        .zip(table.filled_slots.par_chunks_mut(k))
        .zip(log.records.par_iter())
        .for_each_init(AuctionScratch::default, |scratch, ((((c, r), v), f), rec)| {
            let instances = grid.instances(&rec.category).expect("checked");
            let row = simulate_row(rec, instances, model, scratch);
            c.copy_from_slice(&row.clicks);
            r.copy_from_slice(&row.revenue);
            v.copy_from_slice(&row.conversions);
            f.copy_from_slice(&row.filled);
        });
    Ok(table)
}

/// Builds per-category column sums directly, without materializing the
/// dense table. Produces bit-identical results to
/// `build_coefficient_table(..).summarize()`.
pub fn build_table_summary(
    log: &ReplayLog,
    grid: &ParamGrid,
    model: &dyn CtrModel,
) -> Result<TableSummary> {
    check_categories(log, grid)?;
    let (categories, index) = category_index(grid);
    let k = grid.k();
    let order = id_order(log.records.iter().map(|r| r.request_id.as_str()));
    let cat_of: Vec<usize> = log
        .records
        .iter()
        .map(|r| index[r.category.as_str()])
        .collect();
    let columns = fold_chunks(
        &order,
        &categories,
        k,
        |i| cat_of[i],
        |i| log.records[i].n_slots,
        |i, scratch, sink| {
            let rec = &log.records[i];
            let instances = grid.instances(&rec.category).expect("checked");
            let row = simulate_row(rec, instances, model, scratch);
            sink(row.as_ref());
        },
    );
    Ok(TableSummary {
        grid: grid.spec.clone(),
        k,
        categories: columns,
    })
}

impl CoefficientTable {
    pub fn n_requests(&self) -> usize {
        self.requests.len()
    }

    fn row(&self, i: usize) -> RowRef<'_> {
        let s = i * self.k..(i + 1) * self.k;
        RowRef {
            clicks: &self.clicks[s.clone()],
            revenue: &self.revenue[s.clone()],
            conversions: &self.conversions[s.clone()],
            filled: &self.filled_slots[s],
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> (f64, f64, f64, u16) {
        let at = i * self.k + j;
        (
            self.clicks[at],
            self.revenue[at],
            self.conversions[at],
            self.filled_slots[at],
        )
    }

    pub fn has_ad(&self, i: usize, j: usize) -> bool {
        self.filled_slots[i * self.k + j] > 0
    }

    /// Collapses the rows of each category into column sums.
    pub fn summarize(&self) -> TableSummary {
        let order = id_order(self.requests.iter().map(|r| r.request_id.as_str()));
        let columns = fold_chunks(
            &order,
            &self.categories,
            self.k,
            |i| self.requests[i].category as usize,
            |i| self.requests[i].n_slots,
            |i, _, sink| sink(self.row(i)),
        );
        TableSummary {
            grid: self.grid.clone(),
            k: self.k,
            categories: columns,
        }
    }
}
