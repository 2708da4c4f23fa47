use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{
    AdCandidate, ImpressionLog, ImpressionRecord, ReplayLog, ReplayRecord,
};
use crate::auction::{run_auction, CategoryParams, CtrModel, RawCtr};
use crate::error::{Error, Result};
use crate::io;

/// Mapping from true position-1 CTR to the logged predicted CTR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Miscalibration {
    /// `predicted = true * factor`.
    Multiplicative { factor: f64 },
    /// `predicted = factor * true^exponent`.
    Power { factor: f64, exponent: f64 },
}

impl Default for Miscalibration {
    fn default() -> Self {
        Miscalibration::Multiplicative { factor: 1.3 }
    }
}

impl Miscalibration {
    fn apply(&self, ctr: f64) -> f64 {
        match *self {
            Miscalibration::Multiplicative { factor } => ctr * factor,
            Miscalibration::Power { factor, exponent } => factor * ctr.powf(exponent),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Miscalibration::Multiplicative { factor } => factor > 0.0 && factor.is_finite(),
            Miscalibration::Power { factor, exponent } => {
                factor > 0.0 && factor.is_finite() && exponent > 0.0 && exponent.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid miscalibration {self:?}")))
        }
    }
}

/// Log-normal distribution described by its median and log-scale sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub median: f64,
    pub sigma: f64,
}

impl LogNormalSpec {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.median.ln() + self.sigma * z).exp()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.median > 0.0 && self.median.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()
        {
            Ok(())
        } else {
            Err(Error::config(format!("{name}: invalid log-normal {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_requests: usize,
    pub n_categories: usize,
    pub slots_min: u32,
    pub slots_max: u32,
    pub candidates_min: u32,
    pub candidates_max: u32,
    pub bid: LogNormalSpec,
    /// True position-1 CTR.
    pub ctr: LogNormalSpec,
    /// True CTR at position `p` is the position-1 CTR times `position_decay^(p-1)`.
    pub position_decay: f64,
    pub cvr: LogNormalSpec,
    pub miscalibration: Miscalibration,
    /// Log-scale sigma of multiplicative noise on predicted CTRs.
    pub prediction_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_requests: 1000,
            n_categories: 4,
            slots_min: 1,
            slots_max: 3,
            candidates_min: 0,
            candidates_max: 8,
            bid: LogNormalSpec {
                median: 1.0,
                sigma: 0.5,
            },
            ctr: LogNormalSpec {
                median: 0.03,
                sigma: 0.6,
            },
            position_decay: 0.7,
            cvr: LogNormalSpec {
                median: 0.05,
                sigma: 0.5,
            },
            miscalibration: Miscalibration::default(),
            prediction_noise: 0.0,
            seed: 0,
        }
    }
}

const CTR_CLIP: (f64, f64) = (1e-4, 0.5);
const PREDICTED_CLIP: (f64, f64) = (1e-6, 0.99);

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 {
            return Err(Error::config("n_categories must be >= 1"));
        }
        if self.slots_min == 0 || self.slots_min > self.slots_max {
            return Err(Error::config("slots range must satisfy 1 <= min <= max"));
        }
        if self.candidates_min > self.candidates_max {
            return Err(Error::config("candidates range must satisfy min <= max"));
        }
        self.bid.validate("bid")?;
        self.ctr.validate("ctr")?;
        self.cvr.validate("cvr")?;
        self.miscalibration.validate()?;
        if !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return Err(Error::config("position_decay must lie in (0, 1]"));
        }
        if !(self.prediction_noise >= 0.0 && self.prediction_noise.is_finite()) {
            return Err(Error::config("prediction_noise must be >= 0"));
        }
        Ok(())
    }

    pub fn category_name(index: usize) -> String {
        format!("cat{index:03}")
    }

    pub fn categories(&self) -> Vec<String> {
        (0..self.n_categories).map(Self::category_name).collect()
    }

    fn predict(&self, true_ctr: f64, rng: &mut impl Rng) -> f64 {
        let noise = if self.prediction_noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            (self.prediction_noise * z).exp()
        } else {
            1.0
        };
        (self.miscalibration.apply(true_ctr) * noise).clamp(PREDICTED_CLIP.0, PREDICTED_CLIP.1)
    }
}

/// Independent stream per (seed, index) so generation order never matters.
pub(crate) fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTruth {
    pub ad_id: String,
    /// True click probability at position 1.
    pub ctr: f64,
    pub cvr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTruth {
    pub request_id: String,
    pub candidates: Vec<CandidateTruth>,
}

/// The click and conversion probabilities the generator used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// Multiplier per 1-based position (index 0 is position 1).
    pub position_factors: Vec<f64>,
    pub requests: Vec<RequestTruth>,
    index: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(position_factors: Vec<f64>, requests: Vec<RequestTruth>) -> Self {
        let index = requests
            .iter()
            .enumerate()
            .map(|(i, r)| (r.request_id.clone(), i))
            .collect();
        Self {
            position_factors,
            requests,
            index,
        }
    }

    pub fn get(&self, request_id: &str) -> Option<&RequestTruth> {
        self.index.get(request_id).map(|&i| &self.requests[i])
    }

    pub fn position_factor(&self, position: u32) -> f64 {
        let idx = position.max(1) as usize - 1;
        self.position_factors
            .get(idx)
            .or(self.position_factors.last())
            .copied()
            .unwrap_or(1.0)
    }

    /// True click probability of `candidate` shown at `position`.
    pub fn click_probability(&self, request_id: &str, candidate: usize, position: u32) -> Option<f64> {
        let rt = self.get(request_id)?;
        let c = rt.candidates.get(candidate)?;
        Some(c.ctr * self.position_factor(position))
    }

    /// Ok if every candidate of every record has a truth entry.
    pub fn check_covers(&self, log: &ReplayLog) -> Result<()> {
        for rec in &log.records {
            let rt = self.get(&rec.request_id).ok_or_else(|| {
                Error::DataIntegrity(format!("no truth for request {}", rec.request_id))
            })?;
            if rt.candidates.len() != rec.candidates.len()
                || rt
                    .candidates
                    .iter()
                    .zip(&rec.candidates)
                    .any(|(t, c)| t.ad_id != c.ad_id)
            {
                return Err(Error::DataIntegrity(format!(
                    "truth for request {} does not match its candidates",
                    rec.request_id
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, log: &ReplayLog) -> GroundTruth {
        let requests = log
            .records
            .iter()
            .filter_map(|r| self.get(&r.request_id).cloned())
            .collect();
        GroundTruth::new(self.position_factors.clone(), requests)
    }
}

/// Evaluates auctions under the generator's true click model.
impl CtrModel for GroundTruth {
    fn ctr(&self, record: &ReplayRecord, candidate: usize, position: u32) -> f64 {
        self.click_probability(&record.request_id, candidate, position)
            .unwrap_or(0.0)
    }
}

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    format: String,
    version: u32,
    position_factors: Vec<f64>,
}

const TRUTH_FORMAT: &str = "mechopt-truth";

pub fn store_ground_truth(truth: &GroundTruth, path: &Path) -> Result<()> {
    let header = serde_json::to_value(TruthHeader {
        format: TRUTH_FORMAT.into(),
        version: 1,
        position_factors: truth.position_factors.clone(),
    })?;
    let body = truth.requests.iter().map(serde_json::to_value);
    let values: Vec<serde_json::Value> =
        std::iter::once(Ok(header)).chain(body).collect::<std::result::Result<_, _>>()?;
    io::write_ndjson(path, &values)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let (header, lines) = io::read_header_and_lines(path)?;
    let header: TruthHeader = io::parse_line(path, 1, &header)?;
    if header.format != TRUTH_FORMAT || header.version != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported truth header {} v{}", header.format, header.version),
        });
    }
    let requests = lines
        .iter()
        .map(|(n, l)| io::parse_line(path, *n, l))
        .collect::<Result<Vec<RequestTruth>>>()?;
    Ok(GroundTruth::new(header.position_factors, requests))
}

fn generate_request(config: &SynthConfig, index: usize) -> (ReplayRecord, RequestTruth) {
    let mut rng = stream_rng(config.seed, index as u64);
    let category = SynthConfig::category_name(rng.random_range(0..config.n_categories));
    let n_slots = rng.random_range(config.slots_min..=config.slots_max);
    let n_candidates = rng.random_range(config.candidates_min..=config.candidates_max);
    let request_id = format!("q{index:08}");
    let mut candidates = Vec::with_capacity(n_candidates as usize);
    let mut truths = Vec::with_capacity(n_candidates as usize);
    for c in 0..n_candidates {
        let ad_id = format!("{request_id}-a{c:02}");
        let bid = config.bid.sample(&mut rng);
        let ctr = config.ctr.sample(&mut rng).clamp(CTR_CLIP.0, CTR_CLIP.1);
        let cvr = config.cvr.sample(&mut rng).clamp(CTR_CLIP.0, CTR_CLIP.1);
        let predicted_ctr = config.predict(ctr, &mut rng);
        candidates.push(AdCandidate {
            ad_id: ad_id.clone(),
            bid,
            predicted_ctr,
            predicted_cvr: cvr,
        });
        truths.push(CandidateTruth { ad_id, ctr, cvr });
    }
    (
        ReplayRecord {
            request_id: request_id.clone(),
            category,
            n_slots,
            candidates,
        },
        RequestTruth {
            request_id,
            candidates: truths,
        },
    )
}

/// Seeded synthetic replay log together with the truth used to draw it.
pub fn generate_replay_log(config: &SynthConfig) -> Result<(ReplayLog, GroundTruth)> {
    config.validate()?;
    let (records, truths): (Vec<_>, Vec<_>) = (0..config.n_requests)
        .into_par_iter()
        .map(|i| generate_request(config, i))
        .unzip();
    let factors = (0..config.slots_max)
        .map(|p| config.position_decay.powi(p as i32))
        .collect();
    Ok((ReplayLog::new(records), GroundTruth::new(factors, truths)))
}

/// Redraws every predicted CTR around the ground truth with a fresh noise
/// stream, keeping bids, CVRs and candidate sets.
pub fn renoise_predictions(
    log: &ReplayLog,
    truth: &GroundTruth,
    config: &SynthConfig,
    seed: u64,
) -> Result<ReplayLog> {
    config.validate()?;
    truth.check_covers(log)?;
    let records = log
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = stream_rng(seed, i as u64);
            let rt = truth.get(&rec.request_id).expect("coverage checked");
            let mut rec = rec.clone();
            for (cand, t) in rec.candidates.iter_mut().zip(&rt.candidates) {
                cand.predicted_ctr = config.predict(t.ctr, &mut rng);
            }
            rec
        })
        .collect();
    Ok(ReplayLog::new(records))
}

/// Serves `replay` with the baseline mechanism on raw predicted CTRs and
/// draws a click for every winning slot from the true CTR at that position.
pub fn generate_impression_log(
    replay: &ReplayLog,
    truth: &GroundTruth,
    baseline: &CategoryParams,
    seed: u64,
) -> Result<ImpressionLog> {
    truth.check_covers(replay)?;
    let per_request: Vec<Vec<ImpressionRecord>> = replay
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = stream_rng(seed, i as u64);
            let params = baseline.get(&rec.category);
            let outcome = run_auction(params, rec, &RawCtr);
            let rt = truth.get(&rec.request_id).expect("coverage checked");
            outcome
                .winners
                .iter()
                .map(|w| {
                    let idx = rec
                        .candidates
                        .iter()
                        .position(|c| c.ad_id == w.ad_id)
                        .expect("winner is a candidate");
                    let p = (rt.candidates[idx].ctr * truth.position_factor(w.slot_position))
                        .clamp(0.0, 1.0);
                    ImpressionRecord {
                        request_id: rec.request_id.clone(),
                        slot_position: w.slot_position,
                        predicted_ctr: rec.candidates[idx].predicted_ctr,
                        clicked: rng.random::<f64>() < p,
                    }
                })
                .collect()
        })
        .collect();
    Ok(ImpressionLog {
        records: per_request.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::MechanismParams;
    use crate::datagen::store_replay_log;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_requests: n,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn empty_config() {
        let (log, truth) = generate_replay_log(&small(0)).unwrap();
        assert!(log.is_empty());
        assert!(truth.requests.is_empty());
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut cfg = small(10);
        cfg.bid.sigma = -1.0;
        assert!(matches!(generate_replay_log(&cfg), Err(Error::Config(_))));
        let mut cfg = small(10);
        cfg.miscalibration = Miscalibration::Multiplicative { factor: 0.0 };
        assert!(generate_replay_log(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ndjson");
        let b = dir.path().join("b.ndjson");
        store_replay_log(&generate_replay_log(&small(300)).unwrap().0, &a).unwrap();
        store_replay_log(&generate_replay_log(&small(300)).unwrap().0, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn truth_aligned_and_decay_monotone() {
        let (log, truth) = generate_replay_log(&small(200)).unwrap();
        truth.check_covers(&log).unwrap();
        assert!(truth.position_factors.windows(2).all(|w| w[1] <= w[0]));
        for rec in &log.records {
            for c in 0..rec.candidates.len() {
                let mut prev = f64::INFINITY;
                for p in 1..=rec.n_slots {
                    let v = truth.click_probability(&rec.request_id, c, p).unwrap();
                    assert!(v > 0.0 && v < 1.0 && v <= prev);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn default_inflation() {
        let (log, truth) = generate_replay_log(&small(50)).unwrap();
        for rec in &log.records {
            let rt = truth.get(&rec.request_id).unwrap();
            for (c, t) in rec.candidates.iter().zip(&rt.candidates) {
                assert!((c.predicted_ctr - (t.ctr * 1.3).min(0.99)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bid_median_within_two_percent() {
        // median sd ~ 1/(2 f(m) sqrt(n)) ~ 0.002 for sigma 0.5, n=1e5;
        // the 2% band is about 10 sd wide.
        let mut cfg = small(100_000);
        cfg.candidates_min = 1;
        cfg.candidates_max = 1;
        let (log, _) = generate_replay_log(&cfg).unwrap();
        let mut bids: Vec<f64> = log.records.iter().map(|r| r.candidates[0].bid).collect();
        bids.sort_by(f64::total_cmp);
        let median = bids[bids.len() / 2];
        assert!((median - 1.0).abs() < 0.02, "median {median}");
    }

    fn constant_truth(log: &ReplayLog, ctr: f64) -> GroundTruth {
        GroundTruth::new(
            vec![1.0],
            log.records
                .iter()
                .map(|r| RequestTruth {
                    request_id: r.request_id.clone(),
                    candidates: r
                        .candidates
                        .iter()
                        .map(|c| CandidateTruth {
                            ad_id: c.ad_id.clone(),
                            ctr,
                            cvr: 0.05,
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    #[test]
    fn zero_candidate_requests_emit_nothing() {
        let mut cfg = small(20);
        cfg.candidates_min = 0;
        cfg.candidates_max = 0;
        let (log, truth) = generate_replay_log(&cfg).unwrap();
        let imps = generate_impression_log(
            &log,
            &truth,
            &CategoryParams::uniform(MechanismParams::default()),
            3,
        )
        .unwrap();
        assert!(imps.records.is_empty());
    }

    #[test]
    fn zero_true_ctr_never_clicks() {
        let (log, _) = generate_replay_log(&small(500)).unwrap();
        let truth = constant_truth(&log, 0.0);
        let imps =
            generate_impression_log(&log, &truth, &CategoryParams::uniform(MechanismParams::default()), 3)
                .unwrap();
        assert!(!imps.records.is_empty());
        assert!(imps.records.iter().all(|r| !r.clicked));
    }

    #[test]
    fn click_rate_within_three_sigma() {
        let mut cfg = small(100_000);
        cfg.slots_min = 1;
        cfg.slots_max = 1;
        cfg.candidates_min = 1;
        cfg.candidates_max = 1;
        let (log, _) = generate_replay_log(&cfg).unwrap();
        let truth = constant_truth(&log, 0.1);
        let imps =
            generate_impression_log(&log, &truth, &CategoryParams::uniform(MechanismParams::default()), 9)
                .unwrap();
        let n = imps.records.len() as f64;
        assert_eq!(imps.records.len(), 100_000);
        let rate = imps.records.iter().filter(|r| r.clicked).count() as f64 / n;
        let band = 3.0 * (0.1f64 * 0.9 / n).sqrt();
        assert!((rate - 0.1).abs() <= band, "rate {rate}");
    }

    #[test]
    fn missing_truth_is_integrity_error() {
        let (log, truth) = generate_replay_log(&small(10)).unwrap();
        let mut partial = truth.requests.clone();
        partial.pop();
        let truth = GroundTruth::new(truth.position_factors.clone(), partial);
        let res = generate_impression_log(&log, &truth, &CategoryParams::uniform(MechanismParams::default()), 1);
        assert!(matches!(res, Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn impressions_deterministic() {
        let (log, truth) = generate_replay_log(&small(300)).unwrap();
        let base = CategoryParams::uniform(MechanismParams::default());
        let a = generate_impression_log(&log, &truth, &base, 5).unwrap();
        let b = generate_impression_log(&log, &truth, &base, 5).unwrap();
        assert_eq!(a, b);
        for imp in &a.records {
            let rec = log.records.iter().find(|r| r.request_id == imp.request_id).unwrap();
            assert!(imp.slot_position >= 1 && imp.slot_position <= rec.n_slots);
        }
    }

    #[test]
    fn truth_file_round_trip() {
        let (_, truth) = generate_replay_log(&small(30)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.ndjson.gz");
        store_ground_truth(&truth, &path).unwrap();
        assert_eq!(load_ground_truth(&path).unwrap(), truth);
    }
}
