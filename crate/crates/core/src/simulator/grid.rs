use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{CategoryParams, MechanismParams, ALPHA_MAX};
use crate::error::{Error, Result};

/// Half-widths of the search box around each category's center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWidths {
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSteps {
    pub alpha: usize,
    pub gamma: usize,
}

impl GridSteps {
    pub fn k(&self) -> usize {
        self.alpha * self.gamma
    }
}

/// Everything needed to rebuild a [`ParamGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub centers: CategoryParams,
    pub half_widths: BoxWidths,
    pub steps: GridSteps,
}

fn linspace(center: f64, half_width: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![center];
    }
    // offset form keeps the middle instance exactly at the center
    (0..steps)
        .map(|t| center + half_width * (2.0 * t as f64 / (steps - 1) as f64 - 1.0))
        .collect()
}

/// Evenly spaced inclusive grid over (alpha, gamma) around `center`,
/// alpha-major. Values outside the valid parameter range are clipped.
pub fn grid_params(
    center: &MechanismParams,
    half_widths: &BoxWidths,
    steps: &GridSteps,
) -> Result<Vec<MechanismParams>> {
    if steps.alpha == 0 || steps.gamma == 0 {
        return Err(Error::config("grid steps must be >= 1 per dimension"));
    }
    if !(half_widths.alpha >= 0.0 && half_widths.gamma >= 0.0) {
        return Err(Error::config("grid half-widths must be >= 0"));
    }
    center.validate()?;
    let alphas = linspace(center.alpha, half_widths.alpha, steps.alpha);
    let gammas = linspace(center.gamma, half_widths.gamma, steps.gamma);
    let mut clipped = false;
    let mut out = Vec::with_capacity(steps.k());
    for &a in &alphas {
        for &g in &gammas {
            let alpha = a.clamp(0.0, ALPHA_MAX);
            let gamma = g.max(0.0);
            clipped |= alpha != a || gamma != g;
            out.push(MechanismParams {
                alpha,
                gamma,
                ..*center
            });
        }
    }
    if clipped {
        warn!("grid box around {center:?} leaves the valid range; instances were clipped");
    }
    Ok(out)
}

/// The K materialized mechanism instances of every category.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    pub spec: GridSpec,
    instances: BTreeMap<String, Vec<MechanismParams>>,
}

impl ParamGrid {
    pub fn new(spec: GridSpec, categories: &[String]) -> Result<Self> {
        let mut instances = BTreeMap::new();
        for c in categories {
            let center = spec.centers.get(c);
            instances.insert(c.clone(), grid_params(center, &spec.half_widths, &spec.steps)?);
        }
        Ok(Self { spec, instances })
    }

    /// A one-instance grid at each category's center.
    pub fn centers_only(centers: CategoryParams, categories: &[String]) -> Result<Self> {
        Self::new(
            GridSpec {
                centers,
                half_widths: BoxWidths {
                    alpha: 0.0,
                    gamma: 0.0,
                },
                steps: GridSteps { alpha: 1, gamma: 1 },
            },
            categories,
        )
    }

    pub fn k(&self) -> usize {
        self.spec.steps.k()
    }

    pub fn categories(&self) -> impl Iterator<Item = &String> {
        self.instances.keys()
    }

    pub fn instances(&self, category: &str) -> Option<&[MechanismParams]> {
        self.instances.get(category).map(Vec::as_slice)
    }

    /// Index of the center instance when both step counts are odd.
    pub fn center_index(&self) -> Option<usize> {
        let s = self.spec.steps;
        (s.alpha % 2 == 1 && s.gamma % 2 == 1).then(|| (s.alpha / 2) * s.gamma + s.gamma / 2)
    }

    /// Stable fingerprint of the grid definition and category set.
    pub fn fingerprint(&self) -> String {
        let cats: Vec<&String> = self.instances.keys().collect();
        let json = serde_json::to_vec(&(&self.spec, cats)).expect("grid spec serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center(alpha: f64, gamma: f64) -> MechanismParams {
        MechanismParams {
            alpha,
            gamma,
            reserve_score: 0.001,
            price_floor: 0.01,
        }
    }

    #[test]
    fn single_step_is_center() {
        let c = center(1.0, 2.0);
        let g = grid_params(&c, &BoxWidths { alpha: 0.5, gamma: 1.0 }, &GridSteps { alpha: 1, gamma: 1 }).unwrap();
        assert_eq!(g, vec![c]);
    }

    #[test]
    fn three_by_three_corners() {
        let g = grid_params(
            &center(1.0, 1.0),
            &BoxWidths { alpha: 0.5, gamma: 1.0 },
            &GridSteps { alpha: 3, gamma: 3 },
        )
        .unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!((g[0].alpha, g[0].gamma), (0.5, 0.0));
        assert_eq!((g[8].alpha, g[8].gamma), (1.5, 2.0));
        assert_eq!(g[4], center(1.0, 1.0));
    }

    #[test]
    fn paper_grid_size() {
        let steps = GridSteps { alpha: 45, gamma: 45 };
        let g = grid_params(&center(1.0, 1.0), &BoxWidths { alpha: 0.5, gamma: 1.0 }, &steps).unwrap();
        assert_eq!(g.len(), 2025);
        assert_eq!(steps.k(), 2025);
    }

    #[test]
    fn clips_out_of_range() {
        let g = grid_params(
            &center(0.2, 0.5),
            &BoxWidths { alpha: 0.5, gamma: 1.0 },
            &GridSteps { alpha: 3, gamma: 3 },
        )
        .unwrap();
        assert!(g.iter().all(|p| p.validate().is_ok()));
        assert_eq!(g[0].alpha, 0.0);
        assert_eq!(g[0].gamma, 0.0);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(grid_params(&center(1.0, 0.0), &BoxWidths { alpha: 0.1, gamma: 0.1 }, &GridSteps { alpha: 0, gamma: 1 }).is_err());
    }

    #[test]
    fn center_index_for_odd_steps() {
        let spec = GridSpec {
            centers: CategoryParams::uniform(center(1.0, 1.0)),
            half_widths: BoxWidths { alpha: 0.5, gamma: 1.0 },
            steps: GridSteps { alpha: 5, gamma: 3 },
        };
        let grid = ParamGrid::new(spec, &["a".to_string()]).unwrap();
        let idx = grid.center_index().unwrap();
        assert_eq!(grid.instances("a").unwrap()[idx], center(1.0, 1.0));
    }
}
