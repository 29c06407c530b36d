//! Speculation utility bookkeeping.
//!
//! Utility is ETR divided by cost, where cost is the mean iteration time
//! normalized to the no-speculation iteration time `t_base`. Windowed values
//! use window means; whole-run values use totals, which makes
//! `run_utility * TPOT == t_base` an algebraic identity.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// What the controller was doing when an iteration ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseTag {
    /// Trial number within the current test phase, starting at 1.
    Test(u32),
    Set,
    BaselineProbe,
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseTag::Test(n) => write!(f, "test:{n}"),
            PhaseTag::Set => f.write_str("set"),
            PhaseTag::BaselineProbe => f.write_str("baseline_probe"),
        }
    }
}

impl FromStr for PhaseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set" => Ok(PhaseTag::Set),
            "baseline_probe" => Ok(PhaseTag::BaselineProbe),
            _ => s
                .strip_prefix("test:")
                .and_then(|n| n.parse().ok())
                .map(PhaseTag::Test)
                .ok_or_else(|| Error::invalid(format!("unknown phase tag `{s}`"))),
        }
    }
}

impl Serialize for PhaseTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhaseTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter_index: u64,
    pub k_used: usize,
    pub tokens_emitted: usize,
    pub draft_time: f64,
    pub verify_time: f64,
    pub sampling_time: f64,
    pub total_time: f64,
    pub phase_tag: PhaseTag,
}

impl IterationRecord {
    pub fn new(
        iter_index: u64,
        k_used: usize,
        tokens_emitted: usize,
        cost: &crate::cost_model::CostBreakdown,
        phase_tag: PhaseTag,
    ) -> Self {
        Self {
            iter_index,
            k_used,
            tokens_emitted,
            draft_time: cost.draft_time,
            verify_time: cost.verify_time(),
            sampling_time: cost.sampling_time,
            total_time: cost.total,
            phase_tag,
        }
    }

    /// A record whose whole time is verification. Handy for synthetic runs.
    pub fn simple(iter_index: u64, k_used: usize, tokens_emitted: usize, total_time: f64, phase_tag: PhaseTag) -> Self {
        Self {
            iter_index,
            k_used,
            tokens_emitted,
            draft_time: 0.0,
            verify_time: total_time,
            sampling_time: 0.0,
            total_time,
            phase_tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub t_base: f64,
    pub samples: u64,
    pub last_refresh_iter: u64,
}

/// ETR, cost and utility of a set of iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySnapshot {
    pub etr: f64,
    pub cost: f64,
    pub utility: f64,
}

impl UtilitySnapshot {
    /// Computes the snapshot from sums over `iterations` records.
    pub fn from_sums(tokens: f64, time: f64, iterations: f64, t_base: f64) -> Self {
        let etr = tokens / iterations;
        let cost = (time / iterations) / t_base;
        Self {
            etr,
            cost,
            utility: etr / cost,
        }
    }
}

/// Sliding-window utility tracker with a no-speculation baseline.
#[derive(Debug, Clone)]
pub struct UtilityAnalyzer {
    window_len: usize,
    window: VecDeque<IterationRecord>,
    window_tokens: usize,
    window_time: f64,
    baseline: Option<BaselineEstimate>,
    probe_time_sum: f64,
    probe_count: u64,
}

pub const DEFAULT_WINDOW_LEN: usize = 16;

impl Default for UtilityAnalyzer {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_LEN)
    }
}

impl UtilityAnalyzer {
    pub fn new(window_len: usize) -> Self {
        let window_len = window_len.max(1);
        Self {
            window_len,
            window: VecDeque::with_capacity(window_len),
            window_tokens: 0,
            window_time: 0.0,
            baseline: None,
            probe_time_sum: 0.0,
            probe_count: 0,
        }
    }

    /// Starts from a known baseline instead of measured probes.
    pub fn with_baseline(window_len: usize, t_base: f64) -> Self {
        let mut a = Self::new(window_len);
        a.baseline = Some(BaselineEstimate {
            t_base,
            samples: 0,
            last_refresh_iter: 0,
        });
        a
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Adds a record to the window. Baseline probes are not part of the
    /// window and are ignored here.
    pub fn record(&mut self, rec: IterationRecord) {
        if rec.phase_tag == PhaseTag::BaselineProbe {
            return;
        }
        if self.window.len() == self.window_len {
            if let Some(old) = self.window.pop_front() {
                self.window_tokens -= old.tokens_emitted;
                self.window_time -= old.total_time;
            }
        }
        self.window_tokens += rec.tokens_emitted;
        self.window_time += rec.total_time;
        self.window.push_back(rec);
    }

    pub fn window(&self) -> impl Iterator<Item = &IterationRecord> {
        self.window.iter()
    }

    pub fn baseline(&self) -> Option<&BaselineEstimate> {
        self.baseline.as_ref()
    }

    pub fn t_base(&self) -> Result<f64> {
        self.baseline.map(|b| b.t_base).ok_or(Error::MissingBaseline)
    }

    /// Mean over every probe seen so far, across refreshes.
    pub fn mean_probe_time(&self) -> Option<f64> {
        (self.probe_count > 0).then(|| self.probe_time_sum / self.probe_count as f64)
    }

    /// Replaces the baseline with the mean time of fresh `k = 0` probes.
    pub fn refresh_baseline(&mut self, probes: &[IterationRecord], at_iter: u64) -> Result<BaselineEstimate> {
        if probes.is_empty() {
            return Err(Error::EmptyProbe);
        }
        if let Some(bad) = probes.iter().find(|p| p.k_used != 0) {
            return Err(Error::invalid(format!(
                "baseline probe at iteration {} ran with k = {}",
                bad.iter_index, bad.k_used
            )));
        }
        let sum: f64 = probes.iter().map(|p| p.total_time).sum();
        let est = BaselineEstimate {
            t_base: sum / probes.len() as f64,
            samples: probes.len() as u64,
            last_refresh_iter: at_iter,
        };
        self.probe_time_sum += sum;
        self.probe_count += probes.len() as u64;
        self.baseline = Some(est);
        Ok(est)
    }

    pub fn etr(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window_tokens as f64 / self.window.len() as f64)
    }

    pub fn cost(&self) -> Result<f64> {
        let t_base = self.t_base()?;
        if self.window.is_empty() {
            return Err(Error::invalid("utility window is empty"));
        }
        Ok((self.window_time / self.window.len() as f64) / t_base)
    }

    pub fn utility(&self) -> Result<f64> {
        Ok(self.snapshot()?.utility)
    }

    pub fn snapshot(&self) -> Result<UtilitySnapshot> {
        let t_base = self.t_base()?;
        if self.window.is_empty() {
            return Err(Error::invalid("utility window is empty"));
        }
        Ok(UtilitySnapshot::from_sums(
            self.window_tokens as f64,
            self.window_time,
            self.window.len() as f64,
            t_base,
        ))
    }
}

/// Cumulative utility of a run: `(tokens / iterations) / ((time / iterations) / t_base)`.
pub fn run_utility(records: &[IterationRecord], t_base: f64) -> f64 {
    let (tokens, time) = totals(records);
    UtilitySnapshot::from_sums(tokens as f64, time, records.len() as f64, t_base).utility
}

/// Time per output token.
pub fn tpot(records: &[IterationRecord]) -> f64 {
    let (tokens, time) = totals(records);
    time / tokens as f64
}

fn totals(records: &[IterationRecord]) -> (usize, f64) {
    records
        .iter()
        .fold((0, 0.0), |(n, t), r| (n + r.tokens_emitted, t + r.total_time))
}

/// Harmonic mean, the right average for rates such as per-request utility.
pub fn harmonic_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| *v <= 0.0) {
        return None;
    }
    Some(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(tokens: usize, time: f64, k: usize) -> IterationRecord {
        IterationRecord::simple(0, k, tokens, time, PhaseTag::Set)
    }

    #[test]
    fn no_speculation_window_has_unit_utility() {
        let mut a = UtilityAnalyzer::with_baseline(16, 28.0);
        for _ in 0..20 {
            a.record(rec(1, 28.0, 0));
        }
        assert_eq!(a.utility().unwrap(), 1.0);
    }

    #[test]
    fn etr_over_cost() {
        let mut a = UtilityAnalyzer::with_baseline(4, 1.0);
        a.record(rec(2, 2.5, 2));
        a.record(rec(1, 1.5, 2));
        let s = a.snapshot().unwrap();
        assert_eq!(s.etr, 1.5);
        assert_eq!(s.cost, 2.0);
        assert_eq!(s.utility, 0.75);
    }

    #[test]
    fn mixed_window() {
        let mut a = UtilityAnalyzer::with_baseline(16, 1.0);
        a.record(rec(2, 1.5, 1));
        a.record(rec(1, 1.0, 1));
        let s = a.snapshot().unwrap();
        assert_relative_eq!(s.etr, 1.5);
        assert_relative_eq!(s.cost, 1.25);
        assert_relative_eq!(s.utility, 1.2);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut a = UtilityAnalyzer::with_baseline(2, 1.0);
        a.record(rec(4, 1.0, 3));
        a.record(rec(1, 1.0, 0));
        a.record(rec(1, 1.0, 0));
        assert_eq!(a.etr(), Some(1.0));
        assert_eq!(a.window().count(), 2);
    }

    #[test]
    fn probes_stay_out_of_window() {
        let mut a = UtilityAnalyzer::with_baseline(4, 1.0);
        a.record(IterationRecord::simple(0, 0, 1, 5.0, PhaseTag::BaselineProbe));
        assert_eq!(a.etr(), None);
    }

    #[test]
    fn cost_needs_baseline() {
        let mut a = UtilityAnalyzer::new(16);
        a.record(rec(1, 1.0, 0));
        assert!(matches!(a.cost(), Err(Error::MissingBaseline)));
        assert!(matches!(a.utility(), Err(Error::MissingBaseline)));
    }

    #[test]
    fn refresh_baseline_means() {
        let mut a = UtilityAnalyzer::new(16);
        let probes: Vec<_> = [27.0, 29.0, 28.0, 28.0]
            .iter()
            .map(|t| IterationRecord::simple(0, 0, 1, *t, PhaseTag::BaselineProbe))
            .collect();
        let est = a.refresh_baseline(&probes, 4).unwrap();
        assert_eq!(est.t_base, 28.0);
        assert_eq!(est.samples, 4);
        assert_eq!(est.last_refresh_iter, 4);
        let ones = vec![IterationRecord::simple(0, 0, 1, 1.0, PhaseTag::BaselineProbe); 4];
        assert_eq!(a.refresh_baseline(&ones, 8).unwrap().t_base, 1.0);
        assert_eq!(a.mean_probe_time(), Some(14.5));
        assert!(matches!(a.refresh_baseline(&[], 9), Err(Error::EmptyProbe)));
        assert!(a.refresh_baseline(&[rec(2, 1.0, 1)], 9).is_err());
    }

    #[test]
    fn run_utility_matches_tpot_speedup() {
        // 200 tokens in 100 iterations taking 150 baseline units.
        let records: Vec<_> = (0..100).map(|_| rec(2, 1.5, 1)).collect();
        let u = run_utility(&records, 1.0);
        assert_relative_eq!(u, 4.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(1.0 / tpot(&records), 4.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn identity_applied() {
        // utility 1.4 at t_base = 28 ms means TPOT 20 ms
        let records = vec![rec(7, 140.0, 6)];
        assert_relative_eq!(run_utility(&records, 28.0), 1.4, max_relative = 1e-12);
        assert_relative_eq!(tpot(&records), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn phase_tag_strings() {
        for tag in [PhaseTag::Test(3), PhaseTag::Set, PhaseTag::BaselineProbe] {
            assert_eq!(tag.to_string().parse::<PhaseTag>().unwrap(), tag);
        }
        assert!("test:x".parse::<PhaseTag>().is_err());
    }

    #[test]
    fn harmonic_mean_basics() {
        assert_eq!(harmonic_mean(&[]), None);
        assert_relative_eq!(harmonic_mean(&[1.0, 2.0]).unwrap(), 4.0 / 3.0);
    }
}
