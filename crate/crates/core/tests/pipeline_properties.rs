//! Cross-module properties: serving vs expectation, calibration totals,
//! input-order invariance.

use std::collections::BTreeMap;

use mechopt_core::auction::{CategoryParams, MechanismParams, RawCtr};
use mechopt_core::calibration::CalibrationMap;
use mechopt_core::datagen::{generate_impression_log, generate_replay_log, SynthConfig};
use mechopt_core::experiment::ExperimentConfig;
use mechopt_core::optimizer::SolveStatus;
use mechopt_core::policy::{evaluate_policy, EvalMode, Policy, PolicyProvenance};
use mechopt_core::simulator::{build_table_summary, ParamGrid, PvrMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(categories: &[String], seed: u64) -> Policy {
    let spec = ExperimentConfig::default().grid;
    let grid = ParamGrid::new(spec, categories).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: BTreeMap<String, Vec<f64>> = categories
        .iter()
        .map(|c| {
            // sparse-ish mixtures so the draw actually matters
            let mut w: Vec<f64> = (0..grid.k())
                .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            w[0] += 0.01;
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            (c.clone(), w)
        })
        .collect();
    let provenance = PolicyProvenance {
        status: SolveStatus::Optimal,
        nu: 0.0,
        targets_hash: String::new(),
        constraints: Vec::new(),
        extra: serde_json::Value::Null,
    };
    Policy::new(grid, weights, provenance).unwrap()
}

#[test]
fn monte_carlo_agrees_with_expectation() {
    let (log, _) = generate_replay_log(&SynthConfig {
        n_requests: 3000,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let policy = random_policy(&log.categories(), 6);
    let revenue = |mode| evaluate_policy(&policy, &log, &RawCtr, mode, PvrMode::Requests).unwrap().totals.revenue;

    let exact = revenue(EvalMode::Expectation);
    let singles: Vec<f64> = (1..=12).map(|seed| revenue(EvalMode::MonteCarlo { seed, reps: 1 })).collect();
    let n = singles.len() as f64;
    let mean = singles.iter().sum::<f64>() / n;
    let sd = (singles.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(sd > 0.0);
    assert!((mean - exact).abs() <= 4.0 * sd / n.sqrt(), "mean {mean} vs {exact}, sd {sd}");

    let many = revenue(EvalMode::MonteCarlo { seed: 99, reps: 25 });
    assert!((many - exact).abs() <= 4.0 * sd / 5.0, "25 reps {many} vs {exact}, sd {sd}");
}

#[test]
fn calibrated_totals_reproduce_clicks_per_position() {
    let synth = SynthConfig {
        n_requests: 20_000,
        seed: 8,
        ..Default::default()
    };
    let (log, truth) = generate_replay_log(&synth).unwrap();
    let baseline = CategoryParams::uniform(MechanismParams {
        alpha: 1.0,
        gamma: 5.0,
        reserve_score: 0.005,
        price_floor: 0.01,
    });
    let impressions = generate_impression_log(&log, &truth, &baseline, 9).unwrap();
    let map = CalibrationMap::fit(&impressions, 30).unwrap();

    let mut by_pos: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for imp in &impressions.records {
        let e = by_pos.entry(imp.slot_position).or_default();
        e.0 += map.apply(imp.slot_position, imp.predicted_ctr);
        e.1 += f64::from(u8::from(imp.clicked));
        // predictions are the truth inflated 1.3x and decayed per slot
        let p = imp.predicted_ctr / 1.3 * 0.7f64.powi(imp.slot_position as i32 - 1);
        e.2 += p * (1.0 - p);
    }
    for (pos, (calibrated, clicks, var)) in by_pos {
        // constant fits on equal-frequency bins keep each bin's click mass
        assert!((calibrated - clicks).abs() <= 1e-9 * clicks.max(1.0), "position {pos}");
        let raw: f64 = impressions
            .records
            .iter()
            .filter(|i| i.slot_position == pos)
            .map(|i| i.predicted_ctr)
            .sum();
        let expected = raw / 1.3 * 0.7f64.powi(pos as i32 - 1);
        assert!((clicks - expected).abs() <= 4.0 * var.sqrt(), "position {pos}: {clicks} vs {expected}");
    }
}

#[test]
fn summary_ignores_request_order() {
    let (log, _) = generate_replay_log(&SynthConfig {
        n_requests: 2000,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let grid = ParamGrid::new(ExperimentConfig::default().grid, &log.categories()).unwrap();
    let a = build_table_summary(&log, &grid, &RawCtr).unwrap();
    let mut shuffled = log.clone();
    shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let b = build_table_summary(&shuffled, &grid, &RawCtr).unwrap();
    assert_eq!(a.k, b.k);
    for (x, y) in a.categories.iter().zip(&b.categories) {
        assert_eq!(x.category, y.category);
        assert_eq!(x.n_requests, y.n_requests);
        assert_eq!(x.impressions, y.impressions);
        assert_eq!(x.has_ad, y.has_ad);
        for (u, v) in [(&x.clicks, &y.clicks), (&x.revenue, &y.revenue), (&x.conversions, &y.conversions)] {
            for (p, q) in u.iter().zip(v.iter()) {
                assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }
    }
}
