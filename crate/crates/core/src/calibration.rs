//! Per-position CTR calibration by weighted isotonic regression.
//!
//! Impressions of each slot position are split into equal-frequency bins
//! over predicted CTR; the empirical click rates of the bins are then fit
//! with a non-decreasing step function via pool-adjacent-violators.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::auction::CtrModel;
use crate::datagen::{ImpressionLog, ReplayRecord};
use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Inclusive lower bound on predicted CTR.
    pub lo: f64,
    /// Exclusive upper bound (the last bin also holds `hi` itself).
    pub hi: f64,
    /// Impression count.
    pub weight: f64,
    /// Clicks / impressions.
    pub empirical_ctr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedBin {
    pub lo: f64,
    pub hi: f64,
    pub omega: f64,
}

/// Sorted, distinct bin cut points taken at equal-frequency quantiles.
/// Cuts equal to the minimum are dropped so no bin is empty.
fn quantile_cuts(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for b in 1..bins {
        let v = sorted[b * n / bins];
        if v > sorted[0] && cuts.last().is_none_or(|&last| v > last) {
            cuts.push(v);
        }
    }
    cuts
}

/// Groups impressions per slot position into at most `bins` equal-frequency
/// bins over predicted CTR.
pub fn bin_impressions(
    log: &ImpressionLog,
    bins: usize,
) -> Result<BTreeMap<u32, Vec<CalibrationBin>>> {
    if bins == 0 {
        return Err(Error::config("bin count must be >= 1"));
    }
    let mut by_position: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    for imp in &log.records {
        by_position
            .entry(imp.slot_position)
            .or_default()
            .push((imp.predicted_ctr, imp.clicked));
    }
    if let Some(&max_pos) = by_position.keys().next_back() {
        for p in 1..max_pos {
            if !by_position.contains_key(&p) {
                warn!("position {p} has no impressions; it will use identity calibration");
            }
        }
    }

    let mut out = BTreeMap::new();
    for (position, mut items) in by_position {
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let sorted: Vec<f64> = items.iter().map(|i| i.0).collect();
        let cuts = quantile_cuts(&sorted, bins);
        let mut counts = vec![(0u64, 0u64); cuts.len() + 1];
        for (ctr, clicked) in &items {
            let idx = cuts.partition_point(|&c| c <= *ctr);
            counts[idx].0 += 1;
            counts[idx].1 += u64::from(*clicked);
        }
        let mut bounds = Vec::with_capacity(cuts.len() + 2);
        bounds.push(0.0);
        bounds.extend_from_slice(&cuts);
        bounds.push(1.0);
        let bins_out = counts
            .iter()
            .enumerate()
            .map(|(i, &(n, clicks))| CalibrationBin {
                lo: bounds[i],
                hi: bounds[i + 1],
                weight: n as f64,
                empirical_ctr: clicks as f64 / n as f64,
            })
            .collect();
        out.insert(position, bins_out);
    }
    Ok(out)
}

/// Weighted pool-adjacent-violators: the non-decreasing sequence minimizing
/// `sum w_i (omega_i - y_i)^2`.
pub fn pava(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(values.len(), weights.len());
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("isotonic weights must be >= 0"));
    }
    if values.is_empty() || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::config("isotonic fit needs at least one positive weight"));
    }

    struct Block {
        w: f64,
        wy: f64,
        y: f64,
        len: usize,
    }
    impl Block {
        fn mean(&self) -> f64 {
            if self.w > 0.0 {
                self.wy / self.w
            } else {
                self.y / self.len as f64
            }
        }
    }

    let mut stack: Vec<Block> = Vec::with_capacity(values.len());
    for (&y, &w) in values.iter().zip(weights) {
        stack.push(Block {
            w,
            wy: w * y,
            y,
            len: 1,
        });
        while stack.len() > 1 {
            let n = stack.len();
            let (prev, cur) = (&stack[n - 2], &stack[n - 1]);
            // zero-weight blocks carry no loss; fold them into a neighbour
            let violates = cur.w == 0.0 || prev.mean() > cur.mean();
            if !violates {
                break;
            }
            let cur = stack.pop().expect("len > 1");
            let prev = stack.last_mut().expect("len > 1");
            prev.w += cur.w;
            prev.wy += cur.wy;
            prev.y += cur.y;
            prev.len += cur.len;
        }
    }

    let mut out = Vec::with_capacity(values.len());
    for b in &stack {
        let m = b.mean();
        out.extend(std::iter::repeat_n(m, b.len));
    }
    Ok(out)
}

/// Fitted calibrated CTR per bin, in bin order.
pub fn fit_isotonic(bins: &[CalibrationBin]) -> Result<Vec<f64>> {
    let values: Vec<f64> = bins.iter().map(|b| b.empirical_ctr).collect();
    let weights: Vec<f64> = bins.iter().map(|b| b.weight).collect();
    pava(&values, &weights)
}

/// Monotone piecewise-constant predicted-to-calibrated CTR map per position.
/// Positions without a fitted map pass predictions through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub positions: BTreeMap<u32, Vec<FittedBin>>,
}

impl CalibrationMap {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn fit(log: &ImpressionLog, bins: usize) -> Result<Self> {
        let binned = bin_impressions(log, bins)?;
        let mut positions = BTreeMap::new();
        for (pos, bins) in binned {
            let omegas = fit_isotonic(&bins)?;
            positions.insert(
                pos,
                bins.iter()
                    .zip(omegas)
                    .map(|(b, omega)| FittedBin {
                        lo: b.lo,
                        hi: b.hi,
                        omega,
                    })
                    .collect(),
            );
        }
        Ok(Self { positions })
    }

    /// Calibrated CTR for `predicted_ctr` shown at `position` (1-based).
    pub fn apply(&self, position: u32, predicted_ctr: f64) -> f64 {
        let Some(bins) = self.positions.get(&position) else {
            return predicted_ctr;
        };
        // first bin whose upper bound exceeds the input; clamps at both ends
        let idx = bins
            .partition_point(|b| b.hi <= predicted_ctr)
            .min(bins.len() - 1);
        bins[idx].omega
    }

    pub fn store(&self, path: &Path, provenance: &serde_json::Value) -> Result<()> {
        let mut lines = vec![serde_json::json!({
            "format": CALIBRATION_FORMAT,
            "version": 1,
            "provenance": provenance,
        })];
        for (&position, bins) in &self.positions {
            for b in bins {
                lines.push(serde_json::json!({
                    "position": position,
                    "lo": b.lo,
                    "hi": b.hi,
                    "omega": b.omega,
                }));
            }
        }
        io::write_ndjson(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        #[derive(Deserialize)]
        struct Line {
            position: u32,
            lo: f64,
            hi: f64,
            omega: f64,
        }
        let (header, body) = io::read_header_and_lines(path)?;
        let header: Header = io::parse_line(path, 1, &header)?;
        if header.format != CALIBRATION_FORMAT || header.version != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported calibration header {} v{}", header.format, header.version),
            });
        }
        let mut positions: BTreeMap<u32, Vec<FittedBin>> = BTreeMap::new();
        for (n, text) in body {
            let l: Line = io::parse_line(path, n, &text)?;
            positions.entry(l.position).or_default().push(FittedBin {
                lo: l.lo,
                hi: l.hi,
                omega: l.omega,
            });
        }
        for bins in positions.values_mut() {
            bins.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        }
        Ok(Self { positions })
    }
}

const CALIBRATION_FORMAT: &str = "mechopt-calibration";

impl CtrModel for CalibrationMap {
    fn ctr(&self, record: &ReplayRecord, candidate: usize, position: u32) -> f64 {
        self.apply(position, record.candidates[candidate].predicted_ctr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ImpressionRecord;
    use proptest::prelude::*;

    fn bins(values: &[f64], weights: &[f64]) -> Vec<CalibrationBin> {
        values
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&y, &w))| CalibrationBin {
                lo: i as f64 / values.len() as f64,
                hi: (i + 1) as f64 / values.len() as f64,
                weight: w,
                empirical_ctr: y,
            })
            .collect()
    }

    /// Grid search over monotone sequences on a 0.01 lattice.
    fn grid_oracle(values: &[f64], weights: &[f64], hi: f64) -> Vec<f64> {
        let steps = (hi / 0.01).round() as usize;
        let mut best = (f64::INFINITY, vec![0.0; 3]);
        for a in 0..=steps {
            for b in a..=steps {
                for c in b..=steps {
                    let w = [a, b, c].map(|s| s as f64 * 0.01);
                    let loss: f64 = (0..3).map(|i| weights[i] * (w[i] - values[i]).powi(2)).sum();
                    if loss < best.0 {
                        best = (loss, w.to_vec());
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn toy_violation_pools_to_mean() {
        let v = [3.0, 1.0, 2.0];
        let w = [1.0, 1.0, 1.0];
        let fit = fit_isotonic(&bins(&v, &w)).unwrap();
        let oracle = grid_oracle(&v, &w, 3.0);
        for (f, o) in fit.iter().zip(&oracle) {
            assert!((f - 2.0).abs() < 1e-12);
            assert!((f - o).abs() < 1e-9);
        }
    }

    #[test]
    fn monotone_input_unchanged() {
        let fit = fit_isotonic(&bins(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(fit, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn weighted_pool() {
        let fit = fit_isotonic(&bins(&[0.2, 0.1], &[1.0, 3.0])).unwrap();
        for f in fit {
            assert!((f - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn all_zero_weights_error() {
        assert!(fit_isotonic(&bins(&[0.2, 0.1], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn zero_weight_bin_stays_monotone() {
        let fit = pava(&[0.3, 0.9, 0.1], &[1.0, 0.0, 1.0]).unwrap();
        assert!(fit.windows(2).all(|w| w[0] <= w[1]));
        assert!((fit[0] - 0.2).abs() < 1e-12 && (fit[2] - 0.2).abs() < 1e-12);
    }

    fn imps(position: u32, data: &[(f64, bool)]) -> ImpressionLog {
        ImpressionLog {
            records: data
                .iter()
                .enumerate()
                .map(|(i, &(p, c))| ImpressionRecord {
                    request_id: format!("r{i}"),
                    slot_position: position,
                    predicted_ctr: p,
                    clicked: c,
                })
                .collect(),
        }
    }

    #[test]
    fn single_bin_pools_everything() {
        let data: Vec<(f64, bool)> = (0..40).map(|i| (0.01 + i as f64 * 0.001, i % 4 == 0)).collect();
        let b = bin_impressions(&imps(1, &data), 1).unwrap();
        assert_eq!(b[&1].len(), 1);
        assert!((b[&1][0].empirical_ctr - 0.25).abs() < 1e-15);
        assert_eq!(b[&1][0].weight, 40.0);
    }

    #[test]
    fn quartile_bins_of_25() {
        let data: Vec<(f64, bool)> = (0..100).map(|i| ((i as f64 + 1.0) / 200.0, false)).collect();
        let b = bin_impressions(&imps(2, &data), 4).unwrap();
        let w: Vec<f64> = b[&2].iter().map(|b| b.weight).collect();
        assert_eq!(w, vec![25.0; 4]);
    }

    #[test]
    fn skewed_boundaries_match_sorted_quartiles() {
        // squared uniforms concentrate near zero
        let raw: Vec<f64> = (0..997).map(|i| ((i * 7919) % 997) as f64 / 997.0).collect();
        let data: Vec<(f64, bool)> = raw.iter().map(|u| (0.001 + 0.5 * u * u, false)).collect();
        let b = bin_impressions(&imps(1, &data), 4).unwrap();
        let mut sorted: Vec<f64> = data.iter().map(|d| d.0).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let quartiles = [sorted[n / 4], sorted[n / 2], sorted[3 * n / 4]];
        let cuts: Vec<f64> = b[&1][1..].iter().map(|b| b.lo).collect();
        assert_eq!(cuts, quartiles);
        let total: f64 = b[&1].iter().map(|b| b.weight).sum();
        assert_eq!(total, n as f64);
    }

    #[test]
    fn tied_boundaries_merge() {
        let data: Vec<(f64, bool)> = (0..100).map(|i| (if i < 80 { 0.05 } else { 0.2 }, false)).collect();
        // quartile cuts all land on the tied value and collapse into one bin
        let b = bin_impressions(&imps(1, &data), 4).unwrap();
        assert_eq!(b[&1].len(), 1);
        let b = bin_impressions(&imps(1, &data), 10).unwrap();
        assert_eq!(b[&1].len(), 2);
        assert_eq!(b[&1][0].weight, 80.0);
    }

    #[test]
    fn zero_bins_rejected() {
        assert!(bin_impressions(&imps(1, &[(0.1, true)]), 0).is_err());
    }

    #[test]
    fn apply_lookup_and_clamp() {
        let map = CalibrationMap {
            positions: BTreeMap::from([(
                1,
                vec![
                    FittedBin { lo: 0.0, hi: 0.1, omega: 0.02 },
                    FittedBin { lo: 0.1, hi: 0.5, omega: 0.07 },
                ],
            )]),
        };
        assert_eq!(map.apply(1, 0.05), 0.02);
        assert_eq!(map.apply(1, 0.1), 0.07);
        assert_eq!(map.apply(1, 0.999), 0.07);
        assert_eq!(map.apply(1, -1.0), 0.02);
        // unseen position passes through
        assert_eq!(map.apply(4, 0.3), 0.3);
    }

    #[test]
    fn perfectly_calibrated_log_maps_near_identity() {
        // deterministic click pattern with rate equal to the predicted ctr
        let mut data = Vec::new();
        for level in 1..=10 {
            let p = level as f64 * 0.05;
            for k in 0..2000 {
                let clicked = ((k as f64 + 0.5) * p).floor() != ((k as f64 - 0.5) * p).floor();
                data.push((p, clicked));
            }
        }
        let log = imps(1, &data);
        let map = CalibrationMap::fit(&log, 10).unwrap();
        for bin in &map.positions[&1] {
            let width = bin.hi - bin.lo;
            let mid = (bin.lo + bin.hi) / 2.0;
            assert!((bin.omega - mid).abs() <= width, "{bin:?}");
        }
        for level in 1..=10 {
            let p = level as f64 * 0.05;
            assert!((map.apply(1, p) - p).abs() < 0.05);
        }
    }

    #[test]
    fn file_round_trip() {
        let data: Vec<(f64, bool)> = (0..300).map(|i| ((i % 97) as f64 / 100.0 + 0.001, i % 3 == 0)).collect();
        let map = CalibrationMap::fit(&imps(1, &data), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.ndjson");
        map.store(&p, &serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(CalibrationMap::load(&p).unwrap(), map);
    }

    proptest! {
        #[test]
        fn apply_is_monotone(data in prop::collection::vec((0.0001f64..0.99, any::<bool>()), 1..300),
                             b in 1usize..20,
                             mut xs in prop::collection::vec(0.0f64..1.0, 2..50)) {
            let map = CalibrationMap::fit(&imps(1, &data), b).unwrap();
            xs.sort_by(f64::total_cmp);
            let ys: Vec<f64> = xs.iter().map(|&x| map.apply(1, x)).collect();
            prop_assert!(ys.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(ys.iter().all(|y| (0.0..=1.0).contains(y)));
        }

        #[test]
        fn pava_preserves_weighted_mean(vals in prop::collection::vec((0.0f64..1.0, 0.1f64..10.0), 1..40)) {
            let (v, w): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let fit = pava(&v, &w).unwrap();
            let a: f64 = fit.iter().zip(&w).map(|(f, w)| f * w).sum();
            let b: f64 = v.iter().zip(&w).map(|(f, w)| f * w).sum();
            prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            prop_assert!(fit.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
