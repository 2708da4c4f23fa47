//! Binary coefficient-table file.
//!
//! ```text
//! offset  size          field
//! 0       5             magic "AOPT1"
//! 5       1             kind: 0 = dense table, 1 = per-category summary
//! 6       4             header length H (u32 LE)
//! 10      H             header, UTF-8 JSON
//! 10+H    ...           payload
//! ```
//!
//! Dense payload, with N requests and K instances, all arrays request-major
//! (entry (i, j) at index i*K + j):
//! clicks `N*K` f64 LE, revenue `N*K` f64 LE, conversions `N*K` f64 LE,
//! filled slots `N*K` u16 LE, then the has-ad indicator as `ceil(N*K/8)`
//! bytes, bit `b` of entry index `e` at byte `e / 8`, bit `e % 8` (LSB first).
//!
//! Summary payload: for each category in header order, five `K`-long f64 LE
//! columns: clicks, revenue, conversions, has-ad count, impressions.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::table::{CategoryColumns, CoefficientTable, RequestMeta, TableSummary};
use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 5] = b"AOPT1";
const KIND_DENSE: u8 = 0;
const KIND_SUMMARY: u8 = 1;

#[derive(Serialize, Deserialize)]
struct DenseHeader {
    version: u32,
    n_requests: usize,
    k: usize,
    categories: Vec<String>,
    grid: GridSpec,
    requests: Vec<RequestMeta>,
    provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SummaryCategory {
    category: String,
    n_requests: u64,
    total_slots: u64,
}

#[derive(Serialize, Deserialize)]
struct SummaryHeader {
    version: u32,
    k: usize,
    categories: Vec<SummaryCategory>,
    grid: GridSpec,
    provenance: serde_json::Value,
}

/// Either layout, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum TableFile {
    Dense(CoefficientTable),
    Summary(TableSummary),
}

impl TableFile {
    pub fn summary(&self) -> TableSummary {
        match self {
            TableFile::Dense(t) => t.summarize(),
            TableFile::Summary(s) => s.clone(),
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn write_file(path: &Path, kind: u8, header: &[u8], payload: &[u8]) -> Result<()> {
    let mut w = io::open_write(path)?;
    w.write_all(MAGIC)?;
    w.write_all(&[kind])?;
    let len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn store_table(table: &CoefficientTable, path: &Path, provenance: &serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&DenseHeader {
        version: 1,
        n_requests: table.n_requests(),
        k: table.k,
        categories: table.categories.clone(),
        grid: table.grid.clone(),
        requests: table.requests.clone(),
        provenance: provenance.clone(),
    })?;
    let n = table.clicks.len();
    let mut payload = Vec::with_capacity(n * 26 + n / 8 + 1);
    put_f64s(&mut payload, &table.clicks);
    put_f64s(&mut payload, &table.revenue);
    put_f64s(&mut payload, &table.conversions);
    for f in &table.filled_slots {
        payload.extend_from_slice(&f.to_le_bytes());
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (e, f) in table.filled_slots.iter().enumerate() {
        if *f > 0 {
            bits[e / 8] |= 1 << (e % 8);
        }
    }
    payload.extend_from_slice(&bits);
    write_file(path, KIND_DENSE, &header, &payload)
}

pub fn store_summary(summary: &TableSummary, path: &Path, provenance: &serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&SummaryHeader {
        version: 1,
        k: summary.k,
        categories: summary
            .categories
            .iter()
            .map(|c| SummaryCategory {
                category: c.category.clone(),
                n_requests: c.n_requests,
                total_slots: c.total_slots,
            })
            .collect(),
        grid: summary.grid.clone(),
        provenance: provenance.clone(),
    })?;
    let mut payload = Vec::new();
    for c in &summary.categories {
        put_f64s(&mut payload, &c.clicks);
        put_f64s(&mut payload, &c.revenue);
        put_f64s(&mut payload, &c.conversions);
        put_f64s(&mut payload, &c.has_ad);
        put_f64s(&mut payload, &c.impressions);
    }
    write_file(path, KIND_SUMMARY, &header, &payload)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads the provenance block without decoding the payload.
pub fn read_provenance(path: &Path) -> Result<serde_json::Value> {
    let mut r = io::open_read(path)?;
    let mut fixed = [0u8; 10];
    r.read_exact(&mut fixed)?;
    if &fixed[..5] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let len = u32::from_le_bytes(fixed[6..10].try_into().expect("4 bytes")) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let v: serde_json::Value = serde_json::from_slice(&header)?;
    Ok(v.get("provenance").cloned().unwrap_or(serde_json::Value::Null))
}

pub fn load_table(path: &Path) -> Result<TableFile> {
    let buf = io::read_all(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, expected AOPT1".into()));
    }
    let kind = cur.take(1)?[0];
    let len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    let header = cur.take(len)?;
    let file = match kind {
        KIND_DENSE => {
            let h: DenseHeader = serde_json::from_slice(header)?;
            if h.version != 1 || h.requests.len() != h.n_requests {
                return Err(Error::Format("unsupported or inconsistent dense header".into()));
            }
            let n = h.n_requests * h.k;
            let clicks = cur.f64s(n)?;
            let revenue = cur.f64s(n)?;
            let conversions = cur.f64s(n)?;
            let filled_slots: Vec<u16> = cur
                .take(n * 2)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let bits = cur.take(n.div_ceil(8))?;
            for (e, f) in filled_slots.iter().enumerate() {
                if ((bits[e / 8] >> (e % 8)) & 1 == 1) != (*f > 0) {
                    return Err(Error::Format(format!("has-ad bit {e} disagrees with filled slots")));
                }
            }
            TableFile::Dense(CoefficientTable {
                grid: h.grid,
                k: h.k,
                categories: h.categories,
                requests: h.requests,
                clicks,
                revenue,
                conversions,
                filled_slots,
            })
        }
        KIND_SUMMARY => {
            let h: SummaryHeader = serde_json::from_slice(header)?;
            if h.version != 1 {
                return Err(Error::Format("unsupported summary header".into()));
            }
            let mut categories = Vec::with_capacity(h.categories.len());
            for c in h.categories {
                categories.push(CategoryColumns {
                    category: c.category,
                    n_requests: c.n_requests,
                    total_slots: c.total_slots,
                    clicks: cur.f64s(h.k)?,
                    revenue: cur.f64s(h.k)?,
                    conversions: cur.f64s(h.k)?,
                    has_ad: cur.f64s(h.k)?,
                    impressions: cur.f64s(h.k)?,
                });
            }
            TableFile::Summary(TableSummary {
                grid: h.grid,
                k: h.k,
                categories,
            })
        }
        other => return Err(Error::Format(format!("unknown table kind {other}"))),
    };
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            buf.len() - cur.pos
        )));
    }
    Ok(file)
}
