//! Learned mixture policies: per-request instance sampling, serving and
//! held-out evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{run_auction, run_totals, AuctionOutcome, AuctionScratch, CtrModel, MechanismParams, PreparedRequest};
use crate::datagen::{ReplayLog, ReplayRecord};
use crate::error::{Error, Result};
use crate::io;
use crate::optimizer::{feasibility_report, ConstraintTargets, ProblemSpec, Solution, SolveStatus};
use crate::simulator::{
    build_table_summary, category_totals, GridSpec, MetricTotals, MetricsReport, Mixture, ParamGrid, PvrMode,
};

const POLICY_FORMAT: &str = "mechopt-policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub name: String,
    pub residual: f64,
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProvenance {
    pub status: SolveStatus,
    pub nu: f64,
    pub targets_hash: String,
    #[serde(default)]
    pub constraints: Vec<RowDiagnostics>,
    /// Free-form pipeline context (config hash, seed, inputs).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub grid: ParamGrid,
    pub provenance: PolicyProvenance,
    weights: BTreeMap<String, Vec<f64>>,
}

impl Mixture for Policy {
    fn weights(&self, category: &str) -> Option<&[f64]> {
        self.weights.get(category).map(Vec::as_slice)
    }
}

fn check_weights(category: &str, x: &[f64], k: usize) -> Result<()> {
    if x.len() != k {
        return Err(Error::DataIntegrity(format!(
            "policy for {category} has {} weights, grid has {k}",
            x.len()
        )));
    }
    let sum: f64 = x.iter().sum();
    if x.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::DataIntegrity(format!(
            "policy for {category} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Inverse-CDF draw: the first index whose cumulative weight exceeds `u`.
/// Rounding leftovers go to the last index with positive weight.
pub fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

impl Policy {
    pub fn new(grid: ParamGrid, weights: BTreeMap<String, Vec<f64>>, provenance: PolicyProvenance) -> Result<Self> {
        for (c, x) in &weights {
            if grid.instances(c).is_none() {
                return Err(Error::DataIntegrity(format!("policy category {c} is not in the grid")));
            }
            check_weights(c, x, grid.k())?;
        }
        Ok(Self {
            grid,
            provenance,
            weights,
        })
    }

    /// Wraps a solver result; the policy is usable even when the solve
    /// was infeasible, the status travels along.
    pub fn from_solution(
        grid: ParamGrid,
        problem: &ProblemSpec,
        solution: &Solution,
        targets: &ConstraintTargets,
        extra: serde_json::Value,
    ) -> Result<Self> {
        let mut weights = problem.split(&solution.x);
        for x in weights.values_mut() {
            // the projection leaves sums a few ulps off one
            let s: f64 = x.iter().sum();
            x.iter_mut().for_each(|v| *v /= s);
        }
        let constraints = feasibility_report(problem, solution, 0.0)
            .into_iter()
            .map(|c| RowDiagnostics {
                name: c.name,
                residual: c.residual,
                dual: c.dual,
            })
            .collect();
        Self::new(
            grid,
            weights,
            PolicyProvenance {
                status: solution.status,
                nu: problem.nu,
                targets_hash: targets.fingerprint(),
                constraints,
                extra,
            },
        )
    }

    pub fn categories(&self) -> impl Iterator<Item = &String> {
        self.weights.keys()
    }

    pub fn weights_map(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.weights
    }

    /// Stable identity of the grid and weights, used to key serving rngs.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.grid.fingerprint().as_bytes());
        for (c, x) in &self.weights {
            h.update(c.as_bytes());
            for v in x {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    /// The baseline mechanism served to categories the policy does not know.
    pub fn baseline_params(&self, category: &str) -> MechanismParams {
        *self.grid.spec.centers.get(category)
    }

    fn draw(&self, category: &str, rng: &mut impl Rng) -> Option<MechanismParams> {
        let x = self.weights.get(category)?;
        let j = sample_index(x, rng.random::<f64>());
        Some(self.grid.instances(category).expect("validated")[j])
    }

    /// Rng stream for one request, derived from the policy hash, an
    /// optional seed and the request id.
    pub fn request_rng(&self, seed: Option<u64>, request_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.hash().as_bytes());
        if let Some(s) = seed {
            h.update(s.to_le_bytes());
        }
        h.update(request_id.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format": POLICY_FORMAT,
            "version": 1,
            "grid": self.grid.spec,
            "grid_fingerprint": self.grid.fingerprint(),
            "policy_hash": self.hash(),
            "provenance": self.provenance,
        });
        let mut lines = vec![header];
        for (c, x) in &self.weights {
            lines.push(serde_json::json!({
                "category": c,
                "grid_fingerprint": self.grid.fingerprint(),
                "status": self.provenance.status,
                "probabilities": x,
            }));
        }
        io::write_ndjson(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            grid: GridSpec,
            grid_fingerprint: String,
            provenance: PolicyProvenance,
        }
        #[derive(Deserialize)]
        struct Line {
            category: String,
            grid_fingerprint: String,
            probabilities: Vec<f64>,
        }
        let (header, body) = io::read_header_and_lines(path)?;
        let header: Header = io::parse_line(path, 1, &header)?;
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if header.format != POLICY_FORMAT || header.version != 1 {
            return Err(bad(1, format!("unsupported policy header {} v{}", header.format, header.version)));
        }
        let mut weights = BTreeMap::new();
        for (n, text) in body {
            let l: Line = io::parse_line(path, n, &text)?;
            if l.grid_fingerprint != header.grid_fingerprint {
                return Err(bad(n, format!("category {} references another grid", l.category)));
            }
            weights.insert(l.category, l.probabilities);
        }
        let cats: Vec<String> = weights.keys().cloned().collect();
        let grid = ParamGrid::new(header.grid, &cats)?;
        if grid.fingerprint() != header.grid_fingerprint {
            return Err(bad(1, "grid fingerprint does not match grid spec".into()));
        }
        Self::new(grid, weights, header.provenance)
    }
}

/// Draws a mechanism instance for one request of `category`. Unknown
/// categories get the baseline mechanism.
pub fn sample_params(policy: &Policy, category: &str, rng: &mut impl Rng) -> MechanismParams {
    policy.draw(category, rng).unwrap_or_else(|| {
        log::warn!("category {category} not in policy, serving baseline");
        policy.baseline_params(category)
    })
}

/// One sample, one auction.
pub fn serve_request(policy: &Policy, record: &ReplayRecord, model: &dyn CtrModel) -> AuctionOutcome {
    let mut rng = policy.request_rng(None, &record.request_id);
    let params = sample_params(policy, &record.category, &mut rng);
    run_auction(&params, record, model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    Expectation,
    MonteCarlo { seed: u64, reps: u32 },
}

/// Held-out metrics of serving `policy` on `log`.
pub fn evaluate_policy(
    policy: &Policy,
    log: &ReplayLog,
    model: &dyn CtrModel,
    mode: EvalMode,
    pvr_mode: PvrMode,
) -> Result<MetricsReport> {
    let (known, unknown): (Vec<&ReplayRecord>, Vec<&ReplayRecord>) = log
        .records
        .iter()
        .partition(|r| policy.weights.contains_key(&r.category));
    if !unknown.is_empty() {
        let mut cats: Vec<&str> = unknown.iter().map(|r| r.category.as_str()).collect();
        cats.dedup();
        log::warn!(
            "{} requests in categories outside the policy ({}), served with baseline",
            unknown.len(),
            cats.join(", ")
        );
    }
    let totals = match mode {
        EvalMode::Expectation => {
            let mut totals = MetricTotals::default();
            let known = ReplayLog::new(known.into_iter().cloned().collect());
            let grid = ParamGrid::new(policy.grid.spec.clone(), &known.categories())?;
            let summary = build_table_summary(&known, &grid, model)?;
            for cols in &summary.categories {
                totals.accumulate(&category_totals(cols, &policy.weights[&cols.category]));
            }
            if !unknown.is_empty() {
                let rest = ReplayLog::new(unknown.into_iter().cloned().collect());
                let base = crate::simulator::baseline_metrics(&rest, &policy.grid.spec.centers, model, pvr_mode)?;
                totals.accumulate(&base.totals);
            }
            totals
        }
        EvalMode::MonteCarlo { seed, reps } => {
            if reps == 0 {
                return Err(Error::config("monte carlo evaluation needs reps >= 1"));
            }
            monte_carlo_totals(policy, log, model, seed, reps)
        }
    };
    Ok(MetricsReport::from_totals(totals, pvr_mode))
}

fn monte_carlo_totals(policy: &Policy, log: &ReplayLog, model: &dyn CtrModel, seed: u64, reps: u32) -> MetricTotals {
    let mut per_request: Vec<(&str, MetricTotals)> = log
        .records
        .par_iter()
        .map_init(AuctionScratch::default, |scratch, rec| {
            let prepared = PreparedRequest::new(rec, model);
            let mut rng = policy.request_rng(Some(seed), &rec.request_id);
            let mut t = MetricTotals {
                requests: 1.0,
                available_slots: f64::from(rec.n_slots),
                ..Default::default()
            };
            let w = 1.0 / f64::from(reps);
            for _ in 0..reps {
                let params = policy
                    .draw(&rec.category, &mut rng)
                    .unwrap_or_else(|| policy.baseline_params(&rec.category));
                let o = run_totals(&params, rec, &prepared, scratch);
                t.clicks += w * o.clicks;
                t.revenue += w * o.revenue;
                t.conversions += w * o.conversions;
                t.impressions += w * f64::from(o.filled_slots);
                t.requests_with_ads += if o.has_ad() { w } else { 0.0 };
            }
            (rec.request_id.as_str(), t)
        })
        .collect();
    per_request.sort_by(|a, b| a.0.cmp(b.0));
    let mut totals = MetricTotals::default();
    for (_, t) in &per_request {
        totals.accumulate(t);
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::{CategoryParams, RawCtr};
    use crate::datagen::{generate_replay_log, SynthConfig};
    use crate::simulator::{aggregate_metrics, BoxWidths, GridSteps};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn grid(cats: &[&str], steps: (usize, usize)) -> ParamGrid {
        let spec = GridSpec {
            centers: CategoryParams::uniform(MechanismParams::default()),
            half_widths: BoxWidths { alpha: 0.5, gamma: 0.5 },
            steps: GridSteps {
                alpha: steps.0,
                gamma: steps.1,
            },
        };
        ParamGrid::new(spec, &cats.iter().map(|c| c.to_string()).collect::<Vec<_>>()).unwrap()
    }

    fn provenance() -> PolicyProvenance {
        PolicyProvenance {
            status: SolveStatus::Optimal,
            nu: 0.0,
            targets_hash: String::new(),
            constraints: vec![],
            extra: serde_json::Value::Null,
        }
    }

    fn policy(weights: &[(&str, Vec<f64>)], steps: (usize, usize)) -> Policy {
        let cats: Vec<&str> = weights.iter().map(|(c, _)| *c).collect();
        Policy::new(
            grid(&cats, steps),
            weights.iter().map(|(c, x)| (c.to_string(), x.clone())).collect(),
            provenance(),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_always_picks_its_instance() {
        let p = policy(&[("c", vec![0.0, 0.0, 1.0, 0.0])], (2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let want = p.grid.instances("c").unwrap()[2];
        for _ in 0..1000 {
            assert_eq!(sample_params(&p, "c", &mut rng), want);
        }
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let p = policy(&[("c", vec![0.25; 4])], (2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_index(&p.weights["c"], rng.random())] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn chi_square_goodness_of_fit() {
        let x = vec![0.05, 0.3, 0.0, 0.15, 0.4, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = vec![0usize; x.len()];
        for _ in 0..n {
            counts[sample_index(&x, rng.random())] += 1;
        }
        assert_eq!(counts[2], 0);
        let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] > 0.0).collect();
        let stat: f64 = support
            .iter()
            .map(|&j| {
                let e = n as f64 * x[j];
                (counts[j] as f64 - e).powi(2) / e
            })
            .sum();
        let dist = ChiSquared::new((support.len() - 1) as f64).unwrap();
        let p_value = 1.0 - dist.cdf(stat);
        assert!(p_value > 0.001, "chi2={stat} p={p_value}");
    }

    #[test]
    fn seeded_draws_repeat() {
        let p = policy(&[("c", vec![0.1, 0.2, 0.3, 0.4])], (2, 2));
        let seq = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..50).map(|_| sample_params(&p, "c", &mut rng).alpha).collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
        let a = serve_request(&p, &test_log().records[0], &RawCtr);
        let b = serve_request(&p, &test_log().records[0], &RawCtr);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_category_serves_baseline() {
        let p = policy(&[("c", vec![0.0, 1.0, 0.0, 0.0])], (2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_params(&p, "other", &mut rng), MechanismParams::default());
    }

    fn test_log() -> ReplayLog {
        generate_replay_log(&SynthConfig {
            n_requests: 300,
            n_categories: 2,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn expectation_matches_aggregate() {
        let log = test_log();
        let p = policy(&[("cat000", vec![0.5, 0.0, 0.25, 0.25]), ("cat001", vec![0.0, 0.1, 0.9, 0.0])], (2, 2));
        let got = evaluate_policy(&p, &log, &RawCtr, EvalMode::Expectation, PvrMode::Requests).unwrap();
        let summary = build_table_summary(&log, &p.grid, &RawCtr).unwrap();
        let want = aggregate_metrics(&summary, p.weights_map(), PvrMode::Requests).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn empty_log_reports_zeros() {
        let p = policy(&[("c", vec![0.25; 4])], (2, 2));
        for mode in [EvalMode::Expectation, EvalMode::MonteCarlo { seed: 1, reps: 3 }] {
            let r = evaluate_policy(&p, &ReplayLog::default(), &RawCtr, mode, PvrMode::Requests).unwrap();
            assert_eq!(r.totals, MetricTotals::default());
            assert!(r.ctr.is_none() && r.cpc.is_none() && r.pvr.is_none());
        }
    }

    #[test]
    fn store_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ndjson");
        let p = policy(&[("a", vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]), ("b", vec![1.0 / 6.0; 6])], (3, 2));
        p.store(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.hash(), q.hash());
    }

    #[test]
    fn rejects_non_probability_vectors() {
        let g = grid(&["c"], (2, 1));
        let bad: BTreeMap<String, Vec<f64>> = [("c".to_string(), vec![0.7, 0.7])].into();
        assert!(Policy::new(g, bad, provenance()).is_err());
    }
}
