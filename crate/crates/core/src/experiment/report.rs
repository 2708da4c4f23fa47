use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NamedTargets;
use super::pipeline::{mean_entropy, PolicyEvaluation, RunReport, Workspace};
use crate::error::Result;
use crate::io;
use crate::optimizer::{violated_rows, ConstraintTargets, SolveStatus};
use crate::policy::RowDiagnostics;
use crate::simulator::{MetricDeltas, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Targets,
    Nu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub nu: f64,
    pub targets: ConstraintTargets,
    pub status: SolveStatus,
    pub revenue: f64,
    pub entropy: f64,
    pub violated: Vec<String>,
    pub constraints: Vec<RowDiagnostics>,
    /// Absent for infeasible rows.
    pub evaluation: Option<PolicyEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn all_infeasible(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.status == SolveStatus::Infeasible)
    }
}

fn sweep_row(ws: &Workspace, label: String, targets: &ConstraintTargets, nu: f64) -> Result<SweepRow> {
    let solved = ws.solve(targets, nu)?;
    let status = solved.solution.status;
    let evaluation = match status {
        SolveStatus::Infeasible => None,
        _ => Some(ws.evaluate(&solved.policy)?),
    };
    Ok(SweepRow {
        label,
        nu,
        targets: *targets,
        status,
        revenue: solved.solution.revenue,
        entropy: mean_entropy(&solved.policy),
        violated: violated_rows(&solved.problem, &solved.solution, ws.config.solver.tolerance),
        constraints: solved.policy.provenance.constraints.clone(),
        evaluation,
    })
}

/// One solve and evaluation per target set, at the configured `nu`.
pub fn sweep_targets(ws: &Workspace, sets: &[NamedTargets]) -> Result<SweepTable> {
    let rows = sets
        .iter()
        .map(|t| sweep_row(ws, t.name.clone(), &t.targets, ws.config.nu))
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        kind: SweepKind::Targets,
        config_hash: ws.config.hash(),
        rows,
    })
}

/// One solve and evaluation per entropy weight, at the configured targets.
pub fn sweep_nu(ws: &Workspace, nus: &[f64]) -> Result<SweepTable> {
    let rows = nus
        .iter()
        .map(|&nu| sweep_row(ws, format!("nu={nu}"), &ws.config.targets, nu))
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        kind: SweepKind::Nu,
        config_hash: ws.config.hash(),
        rows,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:+.2}%", v * 100.0))
}

fn deltas(r: &MetricsReport) -> MetricDeltas {
    r.deltas.unwrap_or_default()
}

const DELTA_HEADS: [&str; 6] = ["dREV", "dCTR", "dPPC", "dPVR", "dCVR", "dCPA"];

fn delta_cells(d: &MetricDeltas) -> [Option<f64>; 6] {
    [d.revenue, d.ctr, d.cpc, d.pvr, d.cvr, d.cpa]
}

fn push_row(out: &mut String, cells: &[String], widths: &[usize]) {
    let line: Vec<String> = cells
        .iter()
        .zip(widths)
        .map(|(c, w)| format!("{c:>w$}"))
        .collect();
    let _ = writeln!(out, "{}", line.join("  ").trim_end());
}

fn table(header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    push_row(&mut out, &header, &widths);
    push_row(
        &mut out,
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
        &widths,
    );
    for r in &rows {
        push_row(&mut out, r, &widths);
    }
    out
}

pub fn render_sweep(t: &SweepTable) -> String {
    let mut header = vec!["row".to_string(), "status".into(), "entropy".into()];
    header.extend(DELTA_HEADS.iter().map(|h| format!("train {h}")));
    header.extend(DELTA_HEADS.iter().map(|h| format!("online {h}")));
    let rows = t
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.label.clone()];
            match &r.evaluation {
                None => {
                    cells.push(format!("infeasible ({})", r.violated.join(", ")));
                    cells.push(format!("{:.3}", r.entropy));
                    cells.extend(std::iter::repeat_n("-".to_string(), 12));
                }
                Some(e) => {
                    cells.push(format!("{:?}", r.status).to_lowercase());
                    cells.push(format!("{:.3}", r.entropy));
                    cells.extend(delta_cells(&deltas(&e.train)).map(pct));
                    cells.extend(delta_cells(&deltas(&e.heldout_realized)).map(pct));
                }
            }
            cells
        })
        .collect();
    let mut out = table(header, rows);
    out.push_str("train: calibrated replay on the training log; online: held-out log, truth clicks\n");
    out
}

/// Metric levels and deltas, one line per named report.
pub fn render_metrics(rows: &[(&str, &MetricsReport)]) -> String {
    let header = vec![
        "view".to_string(),
        "revenue".into(),
        "ctr".into(),
        "ppc".into(),
        "pvr".into(),
        "cvr".into(),
        "cpa".into(),
    ]
    .into_iter()
    .chain(DELTA_HEADS.iter().map(|h| h.to_string()))
    .collect();
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
    let rows = rows
        .iter()
        .map(|(name, m)| {
            let mut cells = vec![
                name.to_string(),
                format!("{:.3}", m.totals.revenue),
                num(m.ctr),
                num(m.cpc),
                num(m.pvr),
                num(m.cvr),
                num(m.cpa),
            ];
            cells.extend(delta_cells(&deltas(m)).map(pct));
            cells
        })
        .collect();
    table(header, rows)
}

pub fn render_run(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "status {:?}, nu {}, expected revenue {:.3}, entropy {:.3}",
        r.status, r.nu, r.revenue, r.entropy
    );
    if !r.violated.is_empty() {
        let _ = writeln!(out, "violated: {}", r.violated.join(", "));
    }
    out.push_str(&render_metrics(&[
        ("baseline train", &r.baseline.train),
        ("policy train", &r.policy.train),
        ("baseline held-out", &r.baseline.heldout),
        ("policy held-out", &r.policy.heldout),
        ("baseline online", &r.baseline.heldout_realized),
        ("policy online", &r.policy.heldout_realized),
    ]));
    if !r.constraints.is_empty() {
        let rows = r
            .constraints
            .iter()
            .map(|c| vec![c.name.clone(), format!("{:+.3e}", c.residual), format!("{:.3e}", c.dual)])
            .collect();
        out.push_str(&table(vec!["constraint".into(), "residual".into(), "dual".into()], rows));
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    nu: f64,
    status: String,
    entropy: f64,
    revenue: f64,
    train_revenue: Option<f64>,
    heldout_revenue: Option<f64>,
    online_revenue: Option<f64>,
    train_d_rev: Option<f64>,
    train_d_ctr: Option<f64>,
    train_d_ppc: Option<f64>,
    train_d_pvr: Option<f64>,
    train_d_cvr: Option<f64>,
    train_d_cpa: Option<f64>,
    online_d_rev: Option<f64>,
    online_d_ctr: Option<f64>,
    online_d_ppc: Option<f64>,
    online_d_pvr: Option<f64>,
    online_d_cvr: Option<f64>,
    online_d_cpa: Option<f64>,
}

/// Writes `<stem>.json`, `<stem>.csv` (plot-ready series) and `<stem>.txt`.
pub fn write_sweep(t: &SweepTable, dir: &Path, stem: &str) -> Result<()> {
    io::write_json(&dir.join(format!("{stem}.json")), t)?;
    std::fs::write(dir.join(format!("{stem}.txt")), render_sweep(t))?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv"))).map_err(std::io::Error::from)?;
    for r in &t.rows {
        let e = r.evaluation.as_ref();
        let tr = e.map(|e| deltas(&e.train)).unwrap_or_default();
        let on = e.map(|e| deltas(&e.heldout_realized)).unwrap_or_default();
        w.serialize(CsvRow {
            label: &r.label,
            nu: r.nu,
            status: format!("{:?}", r.status).to_lowercase(),
            entropy: r.entropy,
            revenue: r.revenue,
            train_revenue: e.map(|e| e.train.totals.revenue),
            heldout_revenue: e.map(|e| e.heldout.totals.revenue),
            online_revenue: e.map(|e| e.heldout_realized.totals.revenue),
            train_d_rev: tr.revenue,
            train_d_ctr: tr.ctr,
            train_d_ppc: tr.cpc,
            train_d_pvr: tr.pvr,
            train_d_cvr: tr.cvr,
            train_d_cpa: tr.cpa,
            online_d_rev: on.revenue,
            online_d_ctr: on.ctr,
            online_d_ppc: on.cpc,
            online_d_pvr: on.pvr,
            online_d_cvr: on.cvr,
            online_d_cpa: on.cpa,
        })
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
