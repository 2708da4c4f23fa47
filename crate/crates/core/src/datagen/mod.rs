//! Replay and impression logs: record types, file IO and a seeded
//! synthetic generator with known ground truth.

mod records;
mod synth;

pub use records::{
    load_impression_log, load_replay_log, store_impression_log, store_replay_log, AdCandidate,
    ImpressionLog, ImpressionRecord, ReplayLog, ReplayRecord,
};
pub use synth::{
    generate_impression_log, generate_replay_log, load_ground_truth, renoise_predictions,
    store_ground_truth, CandidateTruth, GroundTruth, LogNormalSpec, Miscalibration,
    RequestTruth, SynthConfig,
};
pub(crate) use synth::stream_rng;
