use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub ad_id: String,
    /// Money per click.
    pub bid: f64,
    pub predicted_ctr: f64,
    pub predicted_cvr: f64,
}

impl AdCandidate {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bid > 0.0
            && self.bid.is_finite()
            && self.predicted_ctr > 0.0
            && self.predicted_ctr < 1.0
            && self.predicted_cvr > 0.0
            && self.predicted_cvr < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::DataIntegrity(format!(
                "candidate {} out of domain (bid {}, ctr {}, cvr {})",
                self.ad_id, self.bid, self.predicted_ctr, self.predicted_cvr
            )))
        }
    }
}

/// One logged auction request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_id: String,
    pub category: String,
    pub n_slots: u32,
    #[serde(default)]
    pub candidates: Vec<AdCandidate>,
}

impl ReplayRecord {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::DataIntegrity(format!(
                "request {} has no slots",
                self.request_id
            )));
        }
        self.candidates.iter().try_for_each(AdCandidate::validate)
    }
}

/// A served ad impression with its realized click label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub request_id: String,
    /// 1-based slot position.
    pub slot_position: u32,
    pub predicted_ctr: f64,
    pub clicked: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayLog {
    pub records: Vec<ReplayRecord>,
}

impl ReplayLog {
    pub fn new(records: Vec<ReplayRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks record domains and request-id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            rec.validate()?;
            if !seen.insert(rec.request_id.as_str()) {
                return Err(Error::DataIntegrity(format!(
                    "duplicate request_id {}",
                    rec.request_id
                )));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated category ids present in the log.
    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImpressionLog {
    pub records: Vec<ImpressionRecord>,
}

pub fn load_replay_log(path: &Path) -> Result<ReplayLog> {
    let records: Vec<ReplayRecord> = io::read_ndjson(path)?;
    let log = ReplayLog::new(records);
    log.validate()?;
    Ok(log)
}

pub fn store_replay_log(log: &ReplayLog, path: &Path) -> Result<()> {
    io::write_ndjson(path, &log.records)
}

pub fn load_impression_log(path: &Path) -> Result<ImpressionLog> {
    Ok(ImpressionLog {
        records: io::read_ndjson(path)?,
    })
}

pub fn store_impression_log(log: &ImpressionLog, path: &Path) -> Result<()> {
    io::write_ndjson(path, &log.records)
}
