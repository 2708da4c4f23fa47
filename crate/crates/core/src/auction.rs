//! Parametric ranking score, GSP allocation and infimum clearing prices.
//!
//! Candidates are ranked in a virtual score space
//! `score = ctr^alpha * bid + gamma * ctr * cvr`, where `ctr` is the
//! position-1 CTR estimate. Each winner pays the smallest bid that keeps its
//! score at or above the next surviving candidate (or the reserve score for
//! the last one), clamped into `[price_floor, bid]`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{AdCandidate, ReplayRecord};
use crate::error::{Error, Result};

pub const ALPHA_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Efficiency exponent applied to the CTR.
    pub alpha: f64,
    /// Weight of the hidden-cost (expected conversion) term.
    pub gamma: f64,
    /// Minimum ranking score required to win any slot.
    pub reserve_score: f64,
    /// Minimum charged price per click.
    pub price_floor: f64,
}

impl Default for MechanismParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.0,
            reserve_score: 0.0,
            price_floor: 0.01,
        }
    }
}

impl MechanismParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=ALPHA_MAX).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 3]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.reserve_score >= 0.0 && self.reserve_score.is_finite()) {
            return Err(Error::config(format!(
                "reserve_score {} must be >= 0",
                self.reserve_score
            )));
        }
        if !(self.price_floor > 0.0 && self.price_floor.is_finite()) {
            return Err(Error::config(format!(
                "price_floor {} must be > 0",
                self.price_floor
            )));
        }
        Ok(())
    }
}

/// Per-category mechanism parameters with a fallback for unlisted categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryParams {
    pub default: MechanismParams,
    #[serde(default)]
    pub per_category: BTreeMap<String, MechanismParams>,
}

impl CategoryParams {
    pub fn uniform(params: MechanismParams) -> Self {
        Self {
            default: params,
            per_category: BTreeMap::new(),
        }
    }

    pub fn get(&self, category: &str) -> &MechanismParams {
        self.per_category.get(category).unwrap_or(&self.default)
    }
}

#[inline]
fn efficiency(alpha: f64, ctr: f64, ln_ctr: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else if alpha == 1.0 {
        ctr
    } else {
        (alpha * ln_ctr).exp()
    }
}

pub fn ranking_score(params: &MechanismParams, ctr: f64, bid: f64, cvr: f64) -> f64 {
    efficiency(params.alpha, ctr, ctr.ln()) * bid + params.gamma * ctr * cvr
}

/// Infimum bid that keeps a winner's score at `next_score`, clamped into
/// `[price_floor, bid]`.
pub fn clearing_price(
    params: &MechanismParams,
    winner: &AdCandidate,
    ctr: f64,
    next_score: f64,
) -> Result<f64> {
    let efficiency = efficiency(params.alpha, ctr, ctr.ln());
    if efficiency == 0.0 {
        return Err(Error::DegenerateCandidate {
            ad_id: winner.ad_id.clone(),
        });
    }
    let raw = (next_score - params.gamma * ctr * winner.predicted_cvr) / efficiency;
    Ok(clamp_price(raw, params.price_floor, winner.bid))
}

#[inline]
fn clamp_price(raw: f64, floor: f64, bid: f64) -> f64 {
    raw.max(floor).min(bid)
}

/// Source of CTR estimates for a candidate at a slot position.
pub trait CtrModel: Sync {
    /// `candidate` indexes `record.candidates`; `position` is 1-based.
    fn ctr(&self, record: &ReplayRecord, candidate: usize, position: u32) -> f64;

    /// CTR the auction ranks and prices on.
    fn ranking_ctr(&self, record: &ReplayRecord, candidate: usize) -> f64 {
        self.ctr(record, candidate, 1)
    }
}

/// Ranks and prices with `serving`, but realizes clicks with `outcome`.
#[derive(Clone, Copy)]
pub struct Realized<'a> {
    pub serving: &'a dyn CtrModel,
    pub outcome: &'a dyn CtrModel,
}

impl CtrModel for Realized<'_> {
    fn ctr(&self, record: &ReplayRecord, candidate: usize, position: u32) -> f64 {
        self.outcome.ctr(record, candidate, position)
    }

    fn ranking_ctr(&self, record: &ReplayRecord, candidate: usize) -> f64 {
        self.serving.ranking_ctr(record, candidate)
    }
}

/// Uses the logged predicted CTR at every position.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawCtr;

impl CtrModel for RawCtr {
    fn ctr(&self, record: &ReplayRecord, candidate: usize, _position: u32) -> f64 {
        record.candidates[candidate].predicted_ctr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Winner {
    pub ad_id: String,
    pub slot_position: u32,
    pub click_price: f64,
    /// CTR estimate at the assigned position.
    pub calibrated_ctr: f64,
    pub predicted_cvr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    /// Sorted by ranking score, descending.
    pub winners: Vec<Winner>,
    pub has_ad: bool,
    pub filled_slots: u32,
}

/// Expected-value summary of one auction; what the coefficient table stores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OutcomeTotals {
    pub clicks: f64,
    pub revenue: f64,
    pub conversions: f64,
    pub filled_slots: u32,
}

impl OutcomeTotals {
    pub fn has_ad(&self) -> bool {
        self.filled_slots > 0
    }
}

impl AuctionOutcome {
    pub fn totals(&self) -> OutcomeTotals {
        let mut t = OutcomeTotals {
            filled_slots: self.filled_slots,
            ..Default::default()
        };
        for w in &self.winners {
            t.clicks += w.calibrated_ctr;
            t.revenue += w.calibrated_ctr * w.click_price;
            t.conversions += w.calibrated_ctr * w.predicted_cvr;
        }
        t
    }
}

/// CTR estimates of one request, resolved once and reused across
/// mechanism parameters.
#[derive(Debug, Clone)]
pub struct PreparedRequest {
    n_slots: usize,
    rank_ctr: Vec<f64>,
    ln_rank_ctr: Vec<f64>,
    /// Candidate-major `[candidate][position - 1]`.
    position_ctr: Vec<f64>,
}

impl PreparedRequest {
    pub fn new(record: &ReplayRecord, model: &dyn CtrModel) -> Self {
        let n_slots = record.n_slots as usize;
        let n = record.candidates.len();
        let mut rank_ctr = Vec::with_capacity(n);
        let mut position_ctr = Vec::with_capacity(n * n_slots);
        for c in 0..n {
            rank_ctr.push(model.ranking_ctr(record, c));
            for p in 1..=n_slots {
                position_ctr.push(model.ctr(record, c, p as u32));
            }
        }
        let ln_rank_ctr = rank_ctr.iter().map(|c| c.ln()).collect();
        Self {
            n_slots,
            rank_ctr,
            ln_rank_ctr,
            position_ctr,
        }
    }
}

/// Reusable buffers for [`run_prepared`].
#[derive(Debug, Default)]
pub struct AuctionScratch {
    ranked: Vec<(f64, usize)>,
}

fn compare_ranked(record: &ReplayRecord, a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    let ca = &record.candidates[a.1];
    let cb = &record.candidates[b.1];
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| cb.bid.partial_cmp(&ca.bid).unwrap_or(Ordering::Equal))
        .then_with(|| ca.ad_id.cmp(&cb.ad_id))
}

/// Core allocation loop. Calls `emit(candidate, position, price, ctr_at_position)`
/// for each winner in rank order and returns the number of filled slots.
pub fn run_prepared(
    params: &MechanismParams,
    record: &ReplayRecord,
    prepared: &PreparedRequest,
    scratch: &mut AuctionScratch,
    mut emit: impl FnMut(usize, u32, f64, f64),
) -> u32 {
    let ranked = &mut scratch.ranked;
    ranked.clear();
    for (idx, cand) in record.candidates.iter().enumerate() {
        let ctr = prepared.rank_ctr[idx];
        // A zero ranking CTR makes the score insensitive to the bid; such
        // candidates cannot generate clicks and are excluded.
        if params.alpha > 0.0 && ctr <= 0.0 {
            continue;
        }
        if cand.bid < params.price_floor {
            continue;
        }
        let efficiency = efficiency(params.alpha, ctr, prepared.ln_rank_ctr[idx]);
        let score = efficiency * cand.bid + params.gamma * ctr * cand.predicted_cvr;
        if score >= params.reserve_score {
            ranked.push((score, idx));
        }
    }
    ranked.sort_unstable_by(|a, b| compare_ranked(record, a, b));

    let winners = ranked.len().min(prepared.n_slots);
    for rank in 0..winners {
        let (_, idx) = ranked[rank];
        let cand = &record.candidates[idx];
        let next_score = ranked
            .get(rank + 1)
            .map_or(params.reserve_score, |next| next.0);
        let ctr = prepared.rank_ctr[idx];
        let efficiency = efficiency(params.alpha, ctr, prepared.ln_rank_ctr[idx]);
        let raw = (next_score - params.gamma * ctr * cand.predicted_cvr) / efficiency;
        let price = clamp_price(raw, params.price_floor, cand.bid);
        let position = rank as u32 + 1;
        let pos_ctr = prepared.position_ctr[idx * prepared.n_slots + rank];
        emit(idx, position, price, pos_ctr);
    }
    winners as u32
}

/// Expected clicks, revenue and conversions of one auction.
pub fn run_totals(
    params: &MechanismParams,
    record: &ReplayRecord,
    prepared: &PreparedRequest,
    scratch: &mut AuctionScratch,
) -> OutcomeTotals {
    let mut t = OutcomeTotals::default();
    t.filled_slots = run_prepared(params, record, prepared, scratch, |idx, _, price, ctr| {
        let cvr = record.candidates[idx].predicted_cvr;
        t.clicks += ctr;
        t.revenue += ctr * price;
        t.conversions += ctr * cvr;
    });
    t
}

/// Runs the GSP auction for one request.
///
/// Ranking uses the position-1 CTR from `model`; each winner's reported CTR
/// is re-evaluated at its assigned position. Ties in score go to the higher
/// bid, then the lexicographically smaller ad id.
pub fn run_auction(
    params: &MechanismParams,
    record: &ReplayRecord,
    model: &dyn CtrModel,
) -> AuctionOutcome {
    let prepared = PreparedRequest::new(record, model);
    let mut scratch = AuctionScratch::default();
    let mut winners = Vec::new();
    let filled = run_prepared(params, record, &prepared, &mut scratch, |idx, pos, price, ctr| {
        let cand = &record.candidates[idx];
        winners.push(Winner {
            ad_id: cand.ad_id.clone(),
            slot_position: pos,
            click_price: price,
            calibrated_ctr: ctr,
            predicted_cvr: cand.predicted_cvr,
        });
    });
    AuctionOutcome {
        winners,
        has_ad: filled > 0,
        filled_slots: filled,
    }
}
