//! Recorded acceptance traces.
//!
//! One record per line with the fields `request_id, iter, k_offered,
//! accepted`. Lines may be comma-separated values (an optional header row
//! naming the fields is skipped) or JSON objects with those keys. Blank
//! lines and lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_FIELDS: [&str; 4] = ["request_id", "iter", "k_offered", "accepted"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub iter: u64,
    pub k_offered: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AcceptanceTrace {
    records: Vec<TraceRecord>,
    index: HashMap<(u64, u64), usize>,
    request_order: Vec<u64>,
}

impl AcceptanceTrace {
    pub fn from_records(records: Vec<TraceRecord>) -> Result<Self> {
        let mut trace = Self::default();
        for (i, rec) in records.into_iter().enumerate() {
            trace.push(rec).map_err(|msg| Error::TraceParse { line: i + 1, msg })?;
        }
        Ok(trace)
    }

    fn push(&mut self, rec: TraceRecord) -> std::result::Result<(), String> {
        if rec.accepted > rec.k_offered {
            return Err(format!(
                "accepted ({}) exceeds k_offered ({})",
                rec.accepted, rec.k_offered
            ));
        }
        if self
            .index
            .insert((rec.request_id, rec.iter), self.records.len())
            .is_some()
        {
            return Err(format!(
                "duplicate record for request {}, iteration {}",
                rec.request_id, rec.iter
            ));
        }
        if !self.request_order.contains(&rec.request_id) {
            self.request_order.push(rec.request_id);
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trace = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec = if line.starts_with('{') {
                serde_json::from_str::<TraceRecord>(line).map_err(|e| Error::TraceParse {
                    line: line_no,
                    msg: e.to_string(),
                })?
            } else {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields == TRACE_FIELDS {
                    continue;
                }
                if fields.len() != 4 {
                    return Err(Error::TraceParse {
                        line: line_no,
                        msg: format!("expected 4 fields ({}), found {}", TRACE_FIELDS.join(","), fields.len()),
                    });
                }
                let mut vals = [0u64; 4];
                for (slot, (field, name)) in vals.iter_mut().zip(fields.iter().zip(TRACE_FIELDS)) {
                    *slot = field.parse().map_err(|_| Error::TraceParse {
                        line: line_no,
                        msg: format!("{name}: `{field}` is not a non-negative integer"),
                    })?;
                }
                TraceRecord {
                    request_id: vals[0],
                    iter: vals[1],
                    k_offered: vals[2],
                    accepted: vals[3],
                }
            };
            trace
                .push(rec)
                .map_err(|msg| Error::TraceParse { line: line_no, msg })?;
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Comma-separated form with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = TRACE_FIELDS.join(",");
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.request_id, r.iter, r.k_offered, r.accepted);
        }
        out
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Request ids in order of first appearance.
    pub fn request_ids(&self) -> &[u64] {
        &self.request_order
    }

    /// Number of recorded iterations for a request.
    pub fn iterations(&self, request_id: u64) -> u64 {
        self.records.iter().filter(|r| r.request_id == request_id).count() as u64
    }

    pub fn record(&self, request_id: u64, iter: u64) -> Result<&TraceRecord> {
        self.index
            .get(&(request_id, iter))
            .map(|&i| &self.records[i])
            .ok_or(Error::MissingTraceRecord { request_id, iter })
    }

    /// Accepted drafts had the recorded iteration been run with `k` drafts.
    /// Acceptance is causal, so offering fewer drafts truncates the prefix.
    pub fn replay_acceptance(&self, request_id: u64, iter: u64, k: u64) -> Result<u64> {
        Ok(self.record(request_id, iter)?.accepted.min(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "request_id,iter,k_offered,accepted\n0,0,3,2\n0,1,3,0\n# comment\n\n{\"request_id\":1,\"iter\":0,\"k_offered\":2,\"accepted\":2}\n";

    #[test]
    fn replay_truncates_prefix() {
        let t = AcceptanceTrace::parse(SAMPLE).unwrap();
        assert_eq!(t.replay_acceptance(0, 0, 3).unwrap(), 2);
        assert_eq!(t.replay_acceptance(0, 0, 1).unwrap(), 1);
        assert_eq!(t.replay_acceptance(0, 1, 2).unwrap(), 0);
        assert_eq!(t.replay_acceptance(1, 0, 7).unwrap(), 2);
        assert_eq!(t.request_ids(), &[0, 1]);
        assert_eq!(t.iterations(0), 2);
    }

    #[test]
    fn missing_record_names_request_and_iteration() {
        let t = AcceptanceTrace::parse(SAMPLE).unwrap();
        let err = t.replay_acceptance(0, 9, 3).unwrap_err();
        assert!(matches!(err, Error::MissingTraceRecord { request_id: 0, iter: 9 }));
        assert!(err.to_string().contains("request 0, iteration 9"));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            AcceptanceTrace::parse("0,0,3"),
            Err(Error::TraceParse { line: 1, .. })
        ));
        assert!(matches!(
            AcceptanceTrace::parse("0,0,1,2"),
            Err(Error::TraceParse { line: 1, .. })
        ));
        assert!(matches!(
            AcceptanceTrace::parse("0,0,3,x"),
            Err(Error::TraceParse { line: 1, .. })
        ));
        assert!(AcceptanceTrace::parse("0,0,3,1\n0,0,3,1").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = AcceptanceTrace::parse(SAMPLE).unwrap();
        let again = AcceptanceTrace::parse(&t.to_csv()).unwrap();
        assert_eq!(t.records(), again.records());
    }
}
