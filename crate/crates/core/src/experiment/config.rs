use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{CategoryParams, MechanismParams};
use crate::calibration::DEFAULT_BINS;
use crate::datagen::SynthConfig;
use crate::error::{Error, Result};
use crate::optimizer::{ConstraintTargets, SolverConfig};
use crate::simulator::{BoxWidths, GridSpec, GridSteps, MetricModes};

pub const CONFIG_VERSION: u32 = 1;

/// Artifact locations; relative paths resolve against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub train_log: PathBuf,
    pub heldout_log: PathBuf,
    pub truth: PathBuf,
    pub impressions: PathBuf,
    pub calibration: PathBuf,
    pub table: PathBuf,
    pub baseline: PathBuf,
    pub policy: PathBuf,
    pub report: PathBuf,
    pub manifest: PathBuf,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        Self {
            train_log: "train.ndjson".into(),
            heldout_log: "heldout.ndjson".into(),
            truth: "truth.ndjson".into(),
            impressions: "impressions.ndjson".into(),
            calibration: "calibration.ndjson".into(),
            table: "table.aopt".into(),
            baseline: "baseline.json".into(),
            policy: "policy.ndjson".into(),
            report: "report.json".into(),
            manifest: "manifest.json".into(),
        }
    }
}

impl ArtifactPaths {
    pub fn resolve(&self, out_dir: &Path) -> ArtifactPaths {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { out_dir.join(p) };
        ArtifactPaths {
            train_log: r(&self.train_log),
            heldout_log: r(&self.heldout_log),
            truth: r(&self.truth),
            impressions: r(&self.impressions),
            calibration: r(&self.calibration),
            table: r(&self.table),
            baseline: r(&self.baseline),
            policy: r(&self.policy),
            report: r(&self.report),
            manifest: r(&self.manifest),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of generated requests set aside for held-out evaluation.
    pub heldout_fraction: f64,
    /// Log-scale sigma of the fresh prediction noise on held-out requests.
    pub heldout_noise: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.3,
            heldout_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub enabled: bool,
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bins: DEFAULT_BINS,
        }
    }
}

/// Seeds for the stochastic stages; unset ones derive from the generator
/// seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: Option<u64>,
    pub heldout_noise: Option<u64>,
    pub impressions: Option<u64>,
    pub monte_carlo: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub generator: u64,
    pub split: u64,
    pub heldout_noise: u64,
    pub impressions: u64,
    pub monte_carlo: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableLayout {
    /// Per-category column sums only.
    #[default]
    Summary,
    /// Every (request, instance) entry.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Expectation,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub mode: EvalKind,
    pub reps: u32,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            mode: EvalKind::Expectation,
            reps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTargets {
    pub name: String,
    #[serde(flatten)]
    pub targets: ConstraintTargets,
}

fn default_grid() -> GridSpec {
    GridSpec {
        centers: CategoryParams::uniform(MechanismParams {
            alpha: 1.0,
            gamma: 5.0,
            reserve_score: 0.005,
            price_floor: 0.01,
        }),
        half_widths: BoxWidths { alpha: 0.5, gamma: 5.0 },
        steps: GridSteps { alpha: 9, gamma: 9 },
    }
}

fn default_nu_sweep() -> Vec<f64> {
    vec![0.0, 1e-4, 1e-2, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub out_dir: PathBuf,
    pub paths: ArtifactPaths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub grid: GridSpec,
    pub calibration: CalibrationConfig,
    pub table: TableLayout,
    pub modes: MetricModes,
    pub targets: ConstraintTargets,
    pub nu: f64,
    pub nu_sweep: Vec<f64>,
    pub target_sweep: Vec<NamedTargets>,
    pub solver: SolverConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            out_dir: "out".into(),
            paths: ArtifactPaths::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            grid: default_grid(),
            calibration: CalibrationConfig::default(),
            table: TableLayout::default(),
            modes: MetricModes::default(),
            targets: ConstraintTargets::default(),
            nu: 0.0,
            nu_sweep: default_nu_sweep(),
            target_sweep: Vec::new(),
            solver: SolverConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.synth.validate()?;
        let f = self.split.heldout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("split.heldout_fraction must lie in (0, 1)"));
        }
        if !(self.split.heldout_noise >= 0.0 && self.split.heldout_noise.is_finite()) {
            return Err(Error::config("split.heldout_noise must be finite and >= 0"));
        }
        if self.calibration.bins == 0 {
            return Err(Error::config("calibration.bins must be >= 1"));
        }
        if self.grid.steps.k() == 0 {
            return Err(Error::config("grid steps must be >= 1"));
        }
        self.targets.validate()?;
        for t in &self.target_sweep {
            t.targets.validate()?;
        }
        for &nu in self.nu_sweep.iter().chain([&self.nu]) {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(Error::config("nu values must be finite and >= 0"));
            }
        }
        self.solver.validate()?;
        if self.evaluation.mode == EvalKind::MonteCarlo && self.evaluation.reps == 0 {
            return Err(Error::config("evaluation.reps must be >= 1"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        let g = self.synth.seed;
        ResolvedSeeds {
            generator: g,
            split: self.seeds.split.unwrap_or(g.wrapping_add(1)),
            heldout_noise: self.seeds.heldout_noise.unwrap_or(g.wrapping_add(2)),
            impressions: self.seeds.impressions.unwrap_or(g.wrapping_add(3)),
            monte_carlo: self.seeds.monte_carlo.unwrap_or(g.wrapping_add(4)),
        }
    }

    /// Hash of everything that shapes the artifacts. The output directory
    /// and artifact paths are excluded so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.targets.ctr_min = Some(0.01);
        cfg.target_sweep.push(NamedTargets {
            name: "loose".into(),
            targets: ConstraintTargets {
                cpc_max: Some(0.0),
                ..Default::default()
            },
        });
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1\n[synth]\nn_requests = 10\n").unwrap();
        assert_eq!(cfg.synth.n_requests, 10);
        assert_eq!(cfg.grid.steps.k(), 81);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("version = 2").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\n[split]\nheldout_fraction = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3").is_err());
    }

    #[test]
    fn hash_ignores_locations() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.nu = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
