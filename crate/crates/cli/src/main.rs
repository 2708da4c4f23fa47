use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mechopt_core::auction::{CtrModel, Realized};
use mechopt_core::calibration::CalibrationMap;
use mechopt_core::datagen::{load_ground_truth, load_impression_log, load_replay_log};
use mechopt_core::experiment::{
    render_metrics, render_run, render_sweep, solve_summary, sweep_nu, sweep_targets, write_sweep,
    BaselineArtifact, EvalKind, ExperimentConfig, NamedTargets, Pipeline, RunReport, SweepTable, TableLayout,
};
use mechopt_core::io;
use mechopt_core::optimizer::{ConstraintTargets, SolveStatus};
use mechopt_core::policy::{evaluate_policy, EvalMode, Policy};
use mechopt_core::simulator::{
    baseline_metrics, build_coefficient_table, build_table_summary, load_table, store_summary, store_table,
    GridSpec, MetricsReport, ParamGrid,
};

/// Constrained GSP mechanism optimization over replayed auction logs.
///
/// Without explicit input paths every subcommand runs the staged pipeline
/// from the config, skipping stages whose outputs are current.
#[derive(Parser)]
#[command(name = "mechopt", version)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for table builds and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/held-out replay logs, ground truth and impressions.
    Gen,
    /// Fit the per-position CTR calibration map.
    Calibrate {
        #[arg(long)]
        impressions: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay the training log under every grid instance.
    Simulate {
        #[arg(long)]
        log: Option<PathBuf>,
        /// Grid spec file (TOML) with centers, half_widths and steps.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write baseline metrics; next to --out by default.
        #[arg(long)]
        baseline_out: Option<PathBuf>,
    },
    /// Solve for the mixture policy.
    Solve {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Targets file (TOML, e.g. `ctr_min = 0.01`).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a policy over a log and report metrics against the baseline.
    Apply {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Realize clicks from this ground truth instead of calibrated CTRs.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Baseline metrics JSON; recomputed on the same log when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One solve and evaluation per target set.
    SweepTargets {
        /// TOML file with `[[target_sweep]]` entries; the config's list otherwise.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// One solve and evaluation per entropy weight.
    SweepNu {
        #[arg(long, value_delimiter = ',')]
        nu: Vec<f64>,
    },
    /// Print the stored run report and sweep tables.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Expectation,
    Mc,
}

/// Non-error outcomes; infeasible results exit with 2.
#[derive(PartialEq)]
enum Outcome {
    Done,
    Infeasible,
}

impl Outcome {
    fn of(status: SolveStatus) -> Self {
        if status == SolveStatus::Infeasible {
            Outcome::Infeasible
        } else {
            Outcome::Done
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetSweepFile {
    target_sweep: Vec<NamedTargets>,
}

#[derive(Serialize)]
struct ApplyReport<'a> {
    policy_hash: String,
    status: SolveStatus,
    mode: EvalMode,
    baseline: &'a MetricsReport,
    policy: &'a MetricsReport,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn provenance(cfg: &ExperimentConfig, inputs: &[&Path]) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.synth.seed,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    })
}

fn print_sweep(t: &SweepTable, dir: &Path, stem: &str) -> Result<Outcome> {
    std::fs::create_dir_all(dir)?;
    write_sweep(t, dir, stem)?;
    print!("{}", render_sweep(t));
    println!("wrote {}", dir.join(format!("{stem}.{{json,csv,txt}}")).display());
    Ok(if t.all_infeasible() {
        Outcome::Infeasible
    } else {
        Outcome::Done
    })
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen => {
            Pipeline::new(cfg, cli.force)?.gen()?;
            Ok(Outcome::Done)
        }

        Command::Calibrate { impressions, bins, out } => {
            if let Some(b) = bins {
                cfg.calibration.bins = b;
            }
            let Some(impressions) = impressions else {
                let p = Pipeline::new(cfg, cli.force)?;
                p.gen()?;
                p.calibrate()?;
                return Ok(Outcome::Done);
            };
            let out = out.context("--out is required with --impressions")?;
            let log = load_impression_log(&impressions)?;
            let map = CalibrationMap::fit(&log, cfg.calibration.bins)?;
            map.store(&out, &provenance(&cfg, &[&impressions]))?;
            println!("calibrated {} positions -> {}", map.positions.len(), out.display());
            Ok(Outcome::Done)
        }

        Command::Simulate {
            log,
            grid,
            calibration,
            out,
            baseline_out,
        } => {
            if let Some(g) = grid {
                cfg.grid = read_toml::<GridSpec>(&g)?;
            }
            let Some(log_path) = log else {
                let p = Pipeline::new(cfg, cli.force)?;
                p.gen()?;
                p.calibrate()?;
                p.simulate()?;
                return Ok(Outcome::Done);
            };
            let out = out.context("--out is required with --log")?;
            let log = load_replay_log(&log_path)?;
            let map = match &calibration {
                Some(p) => CalibrationMap::load(p)?,
                None => CalibrationMap::identity(),
            };
            let grid = ParamGrid::new(cfg.grid.clone(), &log.categories())?;
            let mut inputs = vec![log_path.as_path()];
            inputs.extend(calibration.as_deref());
            let prov = provenance(&cfg, &inputs);
            match cfg.table {
                TableLayout::Dense => store_table(&build_coefficient_table(&log, &grid, &map)?, &out, &prov)?,
                TableLayout::Summary => store_summary(&build_table_summary(&log, &grid, &map)?, &out, &prov)?,
            }
            let report = baseline_metrics(&log, &cfg.grid.centers, &map, cfg.modes.pvr)?;
            let baseline_out = baseline_out.unwrap_or_else(|| out.with_file_name("baseline.json"));
            io::write_json(&baseline_out, &BaselineArtifact { provenance: prov, report })?;
            println!(
                "{} requests x {} instances -> {}, baseline -> {}",
                log.len(),
                grid.k(),
                out.display(),
                baseline_out.display()
            );
            Ok(Outcome::Done)
        }

        Command::Solve {
            table,
            baseline,
            targets,
            nu,
            out,
        } => {
            if let Some(t) = targets {
                cfg.targets = read_toml::<ConstraintTargets>(&t)?;
                cfg.targets.validate()?;
            }
            if let Some(nu) = nu {
                cfg.nu = nu;
            }
            cfg.validate()?;
            let Some(table) = table else {
                let p = Pipeline::new(cfg, cli.force)?;
                p.gen()?;
                p.calibrate()?;
                p.simulate()?;
                p.solve()?;
                let policy = Policy::load(&p.paths.policy)?;
                println!("{:?} -> {}", policy.provenance.status, p.paths.policy.display());
                return Ok(Outcome::of(policy.provenance.status));
            };
            let baseline = baseline.context("--baseline is required with --table")?;
            let out = out.context("--out is required with --table")?;
            let summary = load_table(&table)?.summary();
            let base: BaselineArtifact = io::read_json(&baseline)?;
            let cats: Vec<String> = summary.categories.iter().map(|c| c.category.clone()).collect();
            let grid = ParamGrid::new(summary.grid.clone(), &cats)?;
            let solved = solve_summary(&cfg, &summary, &base.report, &grid, &cfg.targets, cfg.nu)?;
            solved.policy.store(&out)?;
            let s = &solved.solution;
            println!("{:?}, expected revenue {:.3} -> {}", s.status, s.revenue, out.display());
            for c in &solved.policy.provenance.constraints {
                println!("  {:<10} residual {:+.3e} dual {:.3e}", c.name, c.residual, c.dual);
            }
            Ok(Outcome::of(s.status))
        }

        Command::Apply {
            policy,
            log,
            calibration,
            truth,
            baseline,
            mode,
            reps,
            out,
        } => {
            match mode {
                Some(Mode::Expectation) => cfg.evaluation.mode = EvalKind::Expectation,
                Some(Mode::Mc) => cfg.evaluation.mode = EvalKind::MonteCarlo,
                None => {}
            }
            if let Some(r) = reps {
                cfg.evaluation.reps = r;
            }
            cfg.validate()?;
            let Some(policy_path) = policy else {
                let p = Pipeline::new(cfg, cli.force)?;
                let report: RunReport = p.run()?;
                let text = render_run(&report);
                std::fs::write(p.paths.report.with_extension("txt"), &text)?;
                print!("{text}");
                return Ok(Outcome::of(report.status));
            };
            let log_path = log.context("--log is required with --policy")?;
            let out = out.context("--out is required with --policy")?;
            let policy = Policy::load(&policy_path)?;
            let log = load_replay_log(&log_path)?;
            let map = match &calibration {
                Some(p) => CalibrationMap::load(p)?,
                None => CalibrationMap::identity(),
            };
            let truth = truth.as_deref().map(load_ground_truth).transpose()?;
            if let Some(t) = &truth {
                t.check_covers(&log)?;
            }
            let realized;
            let model: &dyn CtrModel = match &truth {
                Some(t) => {
                    realized = Realized {
                        serving: &map,
                        outcome: t,
                    };
                    &realized
                }
                None => &map,
            };
            let eval = match cfg.evaluation.mode {
                EvalKind::Expectation => EvalMode::Expectation,
                EvalKind::MonteCarlo => EvalMode::MonteCarlo {
                    seed: cfg.seeds().monte_carlo,
                    reps: cfg.evaluation.reps,
                },
            };
            let pvr = cfg.modes.pvr;
            let base = match &baseline {
                Some(p) => io::read_json::<BaselineArtifact>(p)
                    .map(|b| b.report)
                    .or_else(|_| io::read_json::<MetricsReport>(p))
                    .with_context(|| format!("reading baseline {}", p.display()))?,
                None => baseline_metrics(&log, &policy.grid.spec.centers, model, pvr)?,
            };
            let metrics = evaluate_policy(&policy, &log, model, eval, pvr)?.with_baseline(&base);
            let status = policy.provenance.status;
            io::write_json(
                &out,
                &ApplyReport {
                    policy_hash: policy.hash(),
                    status,
                    mode: eval,
                    baseline: &base,
                    policy: &metrics,
                },
            )?;
            print!("{}", render_metrics(&[("baseline", &base), ("policy", &metrics)]));
            println!("wrote {}", out.display());
            Ok(Outcome::of(status))
        }

        Command::SweepTargets { targets } => {
            let sets = match targets {
                Some(p) => read_toml::<TargetSweepFile>(&p)?.target_sweep,
                None => cfg.target_sweep.clone(),
            };
            if sets.is_empty() {
                bail!("no target sets: add [[target_sweep]] entries to the config or pass --targets");
            }
            for s in &sets {
                s.targets.validate()?;
            }
            let p = Pipeline::new(cfg, cli.force)?;
            let ws = p.prepare()?;
            let table = sweep_targets(&ws, &sets)?;
            print_sweep(&table, &p.config.out_dir, "sweep_targets")
        }

        Command::SweepNu { nu } => {
            if !nu.is_empty() {
                cfg.nu_sweep = nu;
            }
            cfg.validate()?;
            let p = Pipeline::new(cfg, cli.force)?;
            let ws = p.prepare()?;
            let table = sweep_nu(&ws, &p.config.nu_sweep)?;
            print_sweep(&table, &p.config.out_dir, "sweep_nu")
        }

        Command::Report => {
            let p = Pipeline::new(cfg, false)?;
            let mut found = false;
            if p.paths.report.exists() {
                let r: RunReport = io::read_json(&p.paths.report)?;
                print!("{}", render_run(&r));
                found = true;
            }
            for stem in ["sweep_targets", "sweep_nu"] {
                let path = p.config.out_dir.join(format!("{stem}.json"));
                if path.exists() {
                    let t: SweepTable = io::read_json(&path)?;
                    println!("\n{stem}:");
                    // refreshes the csv series alongside
                    write_sweep(&t, &p.config.out_dir, stem)?;
                    print!("{}", render_sweep(&t));
                    found = true;
                }
            }
            if !found {
                bail!("no report or sweep artifacts in {}", p.config.out_dir.display());
            }
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
