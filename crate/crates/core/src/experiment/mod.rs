//! End-to-end experiment: configuration, staged pipeline, sweeps and
//! reports.

mod config;
mod pipeline;
mod report;

pub use config::{
    ArtifactPaths, CalibrationConfig, EvalKind, EvaluationConfig, ExperimentConfig, NamedTargets, ResolvedSeeds,
    Seeds, SplitConfig, TableLayout, CONFIG_VERSION,
};
pub use pipeline::{
    check_disjoint, heldout_baselines, mean_entropy, solve_summary, split_and_renoise, BaselineArtifact,
    BaselineSet, Manifest, Pipeline, PolicyEvaluation, RunReport, Solved, Stage, StageRecord, Workspace,
};
pub use report::{render_metrics, render_run, render_sweep, sweep_nu, sweep_targets, write_sweep, SweepKind, SweepRow, SweepTable};
