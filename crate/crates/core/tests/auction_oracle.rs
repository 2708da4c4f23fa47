//! The auction and the coefficient table against a from-scratch GSP.

use mechopt_core::auction::{run_auction, CtrModel, MechanismParams, RawCtr};
use mechopt_core::datagen::{AdCandidate, ReplayLog, ReplayRecord};
use mechopt_core::simulator::{
    build_coefficient_table, build_table_summary, BoxWidths, GridSpec, GridSteps, ParamGrid,
};
use mechopt_core::auction::CategoryParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position-dependent CTR so that a table using the wrong slot shows up.
struct Decay;

impl CtrModel for Decay {
    fn ctr(&self, record: &ReplayRecord, candidate: usize, position: u32) -> f64 {
        record.candidates[candidate].predicted_ctr * 0.7f64.powi(position as i32 - 1)
    }
}

fn score(p: &MechanismParams, c: &AdCandidate, bid: f64) -> f64 {
    c.predicted_ctr.powf(p.alpha) * bid + p.gamma * c.predicted_ctr * c.predicted_cvr
}

/// Ranked eligible candidates (index, score), best first.
fn naive_rank(p: &MechanismParams, r: &ReplayRecord) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = r
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.bid >= p.price_floor && c.predicted_ctr > 0.0)
        .map(|(i, c)| (i, score(p, c, c.bid)))
        .filter(|&(_, s)| s >= p.reserve_score)
        .collect();
    v.sort_by(|a, b| {
        let (ca, cb) = (&r.candidates[a.0], &r.candidates[b.0]);
        b.1.total_cmp(&a.1)
            .then(cb.bid.total_cmp(&ca.bid))
            .then(ca.ad_id.cmp(&cb.ad_id))
    });
    v.truncate(r.n_slots as usize);
    v
}

fn slot_with_bid(p: &MechanismParams, r: &ReplayRecord, idx: usize, bid: f64) -> Option<usize> {
    let mut r = r.clone();
    r.candidates[idx].bid = bid;
    naive_rank(p, &r).iter().position(|w| w.0 == idx)
}

/// Smallest bid that still wins the same slot, by bisection.
fn naive_price(p: &MechanismParams, r: &ReplayRecord, idx: usize, slot: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, r.candidates[idx].bid);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if slot_with_bid(p, r, idx, mid) == Some(slot) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn random_record(rng: &mut ChaCha8Rng, id: usize, category: &str) -> ReplayRecord {
    let n = rng.random_range(0..=7);
    ReplayRecord {
        request_id: format!("r{id}"),
        category: category.into(),
        n_slots: rng.random_range(1..=4),
        candidates: (0..n)
            .map(|i| AdCandidate {
                ad_id: format!("a{i}"),
                // coarse bids make exact ties common
                bid: rng.random_range(1..=20) as f64 * 0.1,
                predicted_ctr: rng.random_range(0.005..0.3),
                predicted_cvr: rng.random_range(0.0..0.2),
            })
            .collect(),
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> MechanismParams {
    MechanismParams {
        alpha: rng.random_range(0.0..2.0),
        gamma: rng.random_range(0.0..10.0),
        reserve_score: rng.random_range(0.0..0.1),
        price_floor: rng.random_range(0.0..0.3),
    }
}

#[test]
fn allocation_and_prices_match_naive_gsp() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for a in 0..400 {
        let p = random_params(&mut rng);
        let r = random_record(&mut rng, a, "c");
        let out = run_auction(&p, &r, &RawCtr);
        let want = naive_rank(&p, &r);
        assert_eq!(out.winners.len(), want.len(), "auction {a}");
        assert_eq!(out.filled_slots as usize, want.len());
        for (slot, (w, &(idx, _))) in out.winners.iter().zip(&want).enumerate() {
            assert_eq!(w.ad_id, r.candidates[idx].ad_id, "auction {a} slot {slot}");
            assert_eq!(w.slot_position as usize, slot + 1);
            let price = naive_price(&p, &r, idx, slot);
            let tol = 1e-9 * (1.0 + r.candidates[idx].bid);
            assert!((w.click_price - price).abs() <= tol, "auction {a}: {} vs bisection {price}", w.click_price);
        }
    }
}

#[test]
fn table_columns_match_naive_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let records: Vec<ReplayRecord> = (0..300)
        .map(|i| random_record(&mut rng, i, if i % 3 == 0 { "x" } else { "y" }))
        .collect();
    let log = ReplayLog::new(records);
    let center = MechanismParams {
        alpha: 1.0,
        gamma: 5.0,
        reserve_score: 0.005,
        price_floor: 0.01,
    };
    let spec = GridSpec {
        centers: CategoryParams::uniform(center),
        half_widths: BoxWidths { alpha: 0.5, gamma: 5.0 },
        steps: GridSteps { alpha: 3, gamma: 4 },
    };
    let grid = ParamGrid::new(spec, &log.categories()).unwrap();
    let summary = build_table_summary(&log, &grid, &Decay).unwrap();
    let dense = build_coefficient_table(&log, &grid, &Decay).unwrap();
    assert_eq!(serde_json::to_value(dense.summarize()).unwrap(), serde_json::to_value(&summary).unwrap());

    for cols in &summary.categories {
        let instances = grid.instances(&cols.category).unwrap();
        for (j, p) in instances.iter().enumerate() {
            let (mut clicks, mut revenue, mut conv, mut imps, mut has_ad) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in log.records.iter().filter(|r| r.category == cols.category) {
                let won = naive_rank(p, r);
                for (slot, &(idx, _)) in won.iter().enumerate() {
                    let ctr = Decay.ctr(r, idx, slot as u32 + 1);
                    clicks += ctr;
                    revenue += ctr * naive_price(p, r, idx, slot);
                    conv += ctr * r.candidates[idx].predicted_cvr;
                }
                imps += won.len() as f64;
                has_ad += f64::from(!won.is_empty());
            }
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * (1.0 + b.abs());
            assert!(close(cols.clicks[j], clicks), "{} clicks[{j}]", cols.category);
            assert!(close(cols.revenue[j], revenue), "{} revenue[{j}]", cols.category);
            assert!(close(cols.conversions[j], conv), "{} conversions[{j}]", cols.category);
            assert_eq!(cols.impressions[j], imps);
            assert_eq!(cols.has_ad[j], has_ad);
        }
    }
}
