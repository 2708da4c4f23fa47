use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{ArtifactPaths, EvalKind, ExperimentConfig, ResolvedSeeds, TableLayout};
use crate::auction::{CtrModel, Realized};
use crate::calibration::CalibrationMap;
use crate::datagen::{
    generate_impression_log, generate_replay_log, load_ground_truth, load_impression_log, load_replay_log,
    renoise_predictions, store_ground_truth, store_impression_log, store_replay_log, stream_rng, GroundTruth,
    ReplayLog, SynthConfig,
};
use crate::error::{Error, Result};
use crate::io;
use crate::optimizer::{
    build_problem, entropy, solve, violated_rows, ConstraintTargets, ProblemSpec, Solution, SolveStatus,
};
use crate::policy::{evaluate_policy, EvalMode, Policy, RowDiagnostics};
use crate::simulator::{
    aggregate_metrics, baseline_metrics, build_coefficient_table, build_table_summary, load_table, store_summary,
    store_table, MetricsReport, ParamGrid, TableSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Calibrate,
    Simulate,
    Solve,
    Apply,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Calibrate => "calibrate",
            Stage::Simulate => "simulate",
            Stage::Solve => "solve",
            Stage::Apply => "apply",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_hash: String,
    pub seed: Option<u64>,
    /// Output file name to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Option<ResolvedSeeds>,
    pub stages: BTreeMap<String, StageRecord>,
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(io::read_all(path)?)))
}

fn short_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("json")))[..16].to_string()
}

/// Metrics of the baseline mechanism in the three views a run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub provenance: serde_json::Value,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    /// Expected metrics on the training table, under the calibrated model.
    pub train: MetricsReport,
    /// Held-out replay under the calibrated model.
    pub heldout: MetricsReport,
    /// Held-out replay with clicks from the generator's truth.
    pub heldout_realized: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub status: SolveStatus,
    pub nu: f64,
    pub targets: ConstraintTargets,
    pub objective: f64,
    pub revenue: f64,
    /// Mean Shannon entropy of the per-category policies.
    pub entropy: f64,
    pub constraints: Vec<RowDiagnostics>,
    pub violated: Vec<String>,
    pub baseline: PolicyEvaluation,
    pub policy: PolicyEvaluation,
}

/// Every stage's artifacts, loaded in memory.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub train: ReplayLog,
    pub heldout: ReplayLog,
    pub truth: GroundTruth,
    pub calibration: CalibrationMap,
    pub grid: ParamGrid,
    pub summary: TableSummary,
    pub baseline: BaselineSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSet {
    pub train: MetricsReport,
    pub heldout: MetricsReport,
    pub heldout_realized: MetricsReport,
}

pub struct Solved {
    pub problem: ProblemSpec,
    pub solution: Solution,
    pub policy: Policy,
}

pub fn check_disjoint(train: &ReplayLog, heldout: &ReplayLog) -> Result<()> {
    let ids: HashSet<&str> = train.records.iter().map(|r| r.request_id.as_str()).collect();
    if let Some(r) = heldout.records.iter().find(|r| ids.contains(r.request_id.as_str())) {
        return Err(Error::DataIntegrity(format!(
            "request {} is in both the training and held-out logs",
            r.request_id
        )));
    }
    Ok(())
}

/// Splits generated requests into train and held-out by a seeded coin per
/// request; held-out predicted CTRs are redrawn around the truth.
pub fn split_and_renoise(
    all: ReplayLog,
    truth: &GroundTruth,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<(ReplayLog, ReplayLog)> {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, rec) in all.records.into_iter().enumerate() {
        let u: f64 = stream_rng(seeds.split, i as u64).random();
        if u < cfg.split.heldout_fraction {
            heldout.push(rec);
        } else {
            train.push(rec);
        }
    }
    let noisy = SynthConfig {
        prediction_noise: cfg.split.heldout_noise,
        ..cfg.synth.clone()
    };
    let heldout = renoise_predictions(&ReplayLog::new(heldout), truth, &noisy, seeds.heldout_noise)?;
    let train = ReplayLog::new(train);
    check_disjoint(&train, &heldout)?;
    Ok((train, heldout))
}

pub fn mean_entropy(policy: &Policy) -> f64 {
    let n = policy.weights_map().len();
    if n == 0 {
        return 0.0;
    }
    policy.weights_map().values().map(|x| entropy(x)).sum::<f64>() / n as f64
}

impl Workspace {
    fn eval_mode(&self) -> EvalMode {
        match self.config.evaluation.mode {
            EvalKind::Expectation => EvalMode::Expectation,
            EvalKind::MonteCarlo => EvalMode::MonteCarlo {
                seed: self.config.seeds().monte_carlo,
                reps: self.config.evaluation.reps,
            },
        }
    }

    pub fn realized(&self) -> Realized<'_> {
        Realized {
            serving: &self.calibration,
            outcome: &self.truth,
        }
    }

    /// Solves for `targets` at entropy weight `nu` on the training table.
    pub fn solve(&self, targets: &ConstraintTargets, nu: f64) -> Result<Solved> {
        solve_summary(&self.config, &self.summary, &self.baseline.train, &self.grid, targets, nu)
    }

    pub fn evaluate(&self, policy: &Policy) -> Result<PolicyEvaluation> {
        let pvr = self.config.modes.pvr;
        let train = aggregate_metrics(&self.summary, policy, pvr)?.with_baseline(&self.baseline.train);
        let heldout = evaluate_policy(policy, &self.heldout, &self.calibration, self.eval_mode(), pvr)?
            .with_baseline(&self.baseline.heldout);
        let realized = self.realized();
        let heldout_realized = evaluate_policy(policy, &self.heldout, &realized, EvalMode::Expectation, pvr)?
            .with_baseline(&self.baseline.heldout_realized);
        Ok(PolicyEvaluation {
            train,
            heldout,
            heldout_realized,
        })
    }

    pub fn report(&self, targets: &ConstraintTargets, solved: &Solved) -> Result<RunReport> {
        let b = &self.baseline;
        Ok(RunReport {
            config_hash: self.config.hash(),
            status: solved.solution.status,
            nu: solved.problem.nu,
            targets: *targets,
            objective: solved.solution.objective,
            revenue: solved.solution.revenue,
            entropy: mean_entropy(&solved.policy),
            constraints: solved.policy.provenance.constraints.clone(),
            violated: violated_rows(&solved.problem, &solved.solution, self.config.solver.tolerance),
            baseline: PolicyEvaluation {
                train: b.train.clone(),
                heldout: b.heldout.clone(),
                heldout_realized: b.heldout_realized.clone(),
            },
            policy: self.evaluate(&solved.policy)?,
        })
    }
}

pub fn solve_summary(
    cfg: &ExperimentConfig,
    summary: &TableSummary,
    baseline: &MetricsReport,
    grid: &ParamGrid,
    targets: &ConstraintTargets,
    nu: f64,
) -> Result<Solved> {
    let problem = build_problem(summary, baseline, targets, nu, cfg.modes)?;
    let solution = solve(&problem, &cfg.solver)?;
    log::info!(
        "solve nu={nu}: {:?} after {} outer / {} inner iterations, revenue/request {:.6}",
        solution.status,
        solution.outer_iterations,
        solution.inner_iterations,
        solution.revenue
    );
    let policy = Policy::from_solution(
        grid.clone(),
        &problem,
        &solution,
        targets,
        json!({ "config_hash": cfg.hash() }),
    )?;
    Ok(Solved {
        problem,
        solution,
        policy,
    })
}

/// Staged, resumable pipeline over on-disk artifacts.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub paths: ArtifactPaths,
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let paths = config.paths.resolve(&config.out_dir);
        Ok(Self { config, paths, force })
    }

    fn outputs(&self, stage: Stage) -> Vec<&Path> {
        let p = &self.paths;
        match stage {
            Stage::Gen => vec![&p.train_log, &p.heldout_log, &p.truth, &p.impressions],
            Stage::Calibrate => vec![&p.calibration],
            Stage::Simulate => vec![&p.table, &p.baseline],
            Stage::Solve => vec![&p.policy],
            Stage::Apply => vec![&p.report],
        }
        .into_iter()
        .map(PathBuf::as_path)
        .collect()
    }

    /// Hash of the config sections a stage reads, chained through the
    /// stages before it.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let c = &self.config;
        let parts = match stage {
            Stage::Gen => json!([c.synth, c.split, c.seeds(), c.grid.centers]),
            Stage::Calibrate => json!([self.stage_hash(Stage::Gen), c.calibration]),
            Stage::Simulate => json!([self.stage_hash(Stage::Calibrate), c.grid, c.table, c.modes]),
            Stage::Solve => json!([self.stage_hash(Stage::Simulate), c.targets, c.nu, c.solver]),
            Stage::Apply => json!([self.stage_hash(Stage::Solve), c.evaluation, c.seeds()]),
        };
        short_hash(&parts)
    }

    fn provenance(&self, stage: Stage) -> serde_json::Value {
        json!({
            "stage": stage.name(),
            "config_hash": self.config.hash(),
            "stage_hash": self.stage_hash(stage),
            "seed": self.config.synth.seed,
        })
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        if self.paths.manifest.exists() {
            io::read_json(&self.paths.manifest)
        } else {
            Ok(Manifest::default())
        }
    }

    fn is_current(&self, stage: Stage) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        let outputs = self.outputs(stage);
        if !outputs.iter().all(|p| p.exists()) {
            return Ok(false);
        }
        let manifest = self.load_manifest()?;
        let Some(rec) = manifest.stages.get(stage.name()) else {
            return Ok(false);
        };
        if rec.stage_hash != self.stage_hash(stage) {
            log::info!("{}: config changed since last run", stage.name());
            return Ok(false);
        }
        for p in outputs {
            let key = self.manifest_key(p);
            if rec.outputs.get(&key) != Some(&file_digest(p)?) {
                log::info!("{}: {} changed on disk", stage.name(), p.display());
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn manifest_key(&self, p: &Path) -> String {
        p.strip_prefix(&self.config.out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    fn record(&self, stage: Stage, seed: Option<u64>) -> Result<()> {
        let mut manifest = self.load_manifest()?;
        manifest.config_hash = self.config.hash();
        manifest.seeds = Some(self.config.seeds());
        let mut outputs = BTreeMap::new();
        for p in self.outputs(stage) {
            outputs.insert(self.manifest_key(p), file_digest(p)?);
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                stage_hash: self.stage_hash(stage),
                seed,
                outputs,
            },
        );
        io::write_json(&self.paths.manifest, &manifest)
    }

    /// Runs `stage` unless its outputs are current. Returns whether it ran.
    fn run_stage(&self, stage: Stage, seed: Option<u64>, body: impl FnOnce() -> Result<()>) -> Result<bool> {
        if self.is_current(stage)? {
            log::info!("{}: up to date, skipping", stage.name());
            return Ok(false);
        }
        log::info!("{}: running", stage.name());
        body()?;
        self.record(stage, seed)?;
        Ok(true)
    }

    pub fn gen(&self) -> Result<bool> {
        let seeds = self.config.seeds();
        self.run_stage(Stage::Gen, Some(seeds.generator), || {
            let (all, truth) = generate_replay_log(&self.config.synth)?;
            let (train, heldout) = split_and_renoise(all, &truth, &self.config, &seeds)?;
            let impressions = generate_impression_log(&train, &truth, &self.config.grid.centers, seeds.impressions)?;
            log::info!(
                "gen: {} train / {} held-out requests, {} impressions",
                train.len(),
                heldout.len(),
                impressions.records.len()
            );
            store_replay_log(&train, &self.paths.train_log)?;
            store_replay_log(&heldout, &self.paths.heldout_log)?;
            store_ground_truth(&truth, &self.paths.truth)?;
            store_impression_log(&impressions, &self.paths.impressions)
        })
    }

    pub fn calibrate(&self) -> Result<bool> {
        self.run_stage(Stage::Calibrate, None, || {
            let map = if self.config.calibration.enabled {
                CalibrationMap::fit(&load_impression_log(&self.paths.impressions)?, self.config.calibration.bins)?
            } else {
                CalibrationMap::identity()
            };
            map.store(&self.paths.calibration, &self.provenance(Stage::Calibrate))
        })
    }

    pub fn simulate(&self) -> Result<bool> {
        self.run_stage(Stage::Simulate, None, || {
            let train = load_replay_log(&self.paths.train_log)?;
            let calibration = CalibrationMap::load(&self.paths.calibration)?;
            let grid = ParamGrid::new(self.config.grid.clone(), &train.categories())?;
            let prov = self.provenance(Stage::Simulate);
            log::info!("simulate: {} requests x {} instances", train.len(), grid.k());
            match self.config.table {
                TableLayout::Dense => store_table(&build_coefficient_table(&train, &grid, &calibration)?, &self.paths.table, &prov)?,
                TableLayout::Summary => store_summary(&build_table_summary(&train, &grid, &calibration)?, &self.paths.table, &prov)?,
            }
            let report = baseline_metrics(&train, &self.config.grid.centers, &calibration, self.config.modes.pvr)?;
            io::write_json(
                &self.paths.baseline,
                &BaselineArtifact {
                    provenance: prov,
                    report,
                },
            )
        })
    }

    pub fn solve(&self) -> Result<bool> {
        self.run_stage(Stage::Solve, None, || {
            let summary = load_table(&self.paths.table)?.summary();
            let baseline: BaselineArtifact = io::read_json(&self.paths.baseline)?;
            let cats: Vec<String> = summary.categories.iter().map(|c| c.category.clone()).collect();
            let grid = ParamGrid::new(summary.grid.clone(), &cats)?;
            let solved = solve_summary(
                &self.config,
                &summary,
                &baseline.report,
                &grid,
                &self.config.targets,
                self.config.nu,
            )?;
            solved.policy.store(&self.paths.policy)
        })
    }

    /// Loads every artifact up to the simulation stage.
    pub fn workspace(&self) -> Result<Workspace> {
        let train = load_replay_log(&self.paths.train_log)?;
        let heldout = load_replay_log(&self.paths.heldout_log)?;
        check_disjoint(&train, &heldout)?;
        let truth = load_ground_truth(&self.paths.truth)?;
        truth.check_covers(&heldout)?;
        let calibration = CalibrationMap::load(&self.paths.calibration)?;
        let summary = load_table(&self.paths.table)?.summary();
        let cats: Vec<String> = summary.categories.iter().map(|c| c.category.clone()).collect();
        let grid = ParamGrid::new(summary.grid.clone(), &cats)?;
        let baseline: BaselineArtifact = io::read_json(&self.paths.baseline)?;
        let baseline = heldout_baselines(&self.config, baseline.report, &heldout, &calibration, &truth)?;
        Ok(Workspace {
            config: self.config.clone(),
            train,
            heldout,
            truth,
            calibration,
            grid,
            summary,
            baseline,
        })
    }

    /// Runs the front half of the pipeline and loads its artifacts.
    pub fn prepare(&self) -> Result<Workspace> {
        self.gen()?;
        self.calibrate()?;
        self.simulate()?;
        self.workspace()
    }

    pub fn apply(&self) -> Result<RunReport> {
        let ws = self.workspace()?;
        let policy = Policy::load(&self.paths.policy)?;
        let report_path = self.paths.report.clone();
        if self.is_current(Stage::Apply)? {
            log::info!("apply: up to date, skipping");
            return io::read_json(&report_path);
        }
        // recompute the solve diagnostics from the stored policy
        let problem = build_problem(&ws.summary, &ws.baseline.train, &self.config.targets, self.config.nu, self.config.modes)?;
        let x: Vec<f64> = problem
            .blocks
            .iter()
            .flat_map(|b| {
                policy
                    .weights_map()
                    .get(&b.category)
                    .cloned()
                    .unwrap_or_else(|| vec![1.0 / b.len as f64; b.len])
            })
            .collect();
        let solution = Solution {
            objective: crate::optimizer::objective_value(&problem, &x),
            revenue: problem.revenue_of(&x),
            residuals: problem.rows.iter().map(|r| r.eval(&x)).collect(),
            duals: policy.provenance.constraints.iter().map(|c| c.dual).collect(),
            x,
            status: policy.provenance.status,
            outer_iterations: 0,
            inner_iterations: 0,
            penalty: 0.0,
            stationarity: 0.0,
            trace: Vec::new(),
        };
        let report = ws.report(&self.config.targets, &Solved {
            problem,
            solution,
            policy,
        })?;
        io::write_json(&report_path, &report)?;
        self.record(Stage::Apply, Some(self.config.seeds().monte_carlo))?;
        Ok(report)
    }

    /// gen, calibrate, simulate, solve, apply.
    pub fn run(&self) -> Result<RunReport> {
        self.gen()?;
        self.calibrate()?;
        self.simulate()?;
        self.solve()?;
        self.apply()
    }
}

pub fn heldout_baselines(
    cfg: &ExperimentConfig,
    train: MetricsReport,
    heldout: &ReplayLog,
    calibration: &CalibrationMap,
    truth: &GroundTruth,
) -> Result<BaselineSet> {
    let pvr = cfg.modes.pvr;
    let realized = Realized {
        serving: calibration,
        outcome: truth,
    };
    let centers = &cfg.grid.centers;
    let model: &dyn CtrModel = calibration;
    Ok(BaselineSet {
        train,
        heldout: baseline_metrics(heldout, centers, model, pvr)?,
        heldout_realized: baseline_metrics(heldout, centers, &realized, pvr)?,
    })
}
