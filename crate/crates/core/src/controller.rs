//! The speculation manager.
//!
//! A per-request state machine that alternates short *test* phases, where a
//! few speculation lengths are each tried for `trial_len` iterations, with
//! longer *set* phases that commit to the best one. A set runs with `k = 0`
//! when no trial reached utility 1. Every drop to `k = 0` doubles the next
//! set length (adaptive back-off), and trials move through `k` by hill
//! climbing on the sign of the utility change.
//!
//! ```text
//! warmup(k=0) -> test[trial 1..=M] -> set(S) -> [probe(k=0)] -> test -> ...
//! ```

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::analyzer::{IterationRecord, PhaseTag, UtilityAnalyzer, UtilitySnapshot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Iterations per trial (`t`).
    pub trial_len: u32,
    /// Maximum trials per test phase (`M`); the test phase is at most `M * t`.
    pub max_trials: u32,
    /// Base set-phase length (`S`).
    pub set_len: u32,
    /// Ceiling for the backed-off set length.
    pub set_cap: u32,
    pub k_max: usize,
    /// First trial's `k` when the history holds no positive-`k` entries.
    pub k_start: usize,
    /// Relative utility difference below which two trials count as converged.
    pub convergence_band: f64,
    pub baseline_refresh_interval: u64,
    pub baseline_probe_len: u32,
    pub adaptive_backoff: bool,
    /// Entries kept in the `(k, utility)` history ring.
    pub history_len: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            trial_len: 4,
            max_trials: 4,
            set_len: 16,
            set_cap: 256,
            k_max: 3,
            k_start: 3,
            convergence_band: 0.10,
            baseline_refresh_interval: 100,
            baseline_probe_len: 4,
            adaptive_backoff: true,
            history_len: 8,
        }
    }
}

impl ControllerConfig {
    pub fn test_len(&self) -> u32 {
        self.max_trials * self.trial_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("controller: {m}")));
        if self.trial_len == 0 {
            return bad("trial_len must be >= 1");
        }
        if self.max_trials == 0 {
            return bad("max_trials must be >= 1");
        }
        if self.set_len < self.trial_len {
            return bad("set_len must be >= trial_len");
        }
        if self.set_cap < self.set_len {
            return bad("set_cap must be >= set_len");
        }
        if self.k_max == 0 {
            return bad("k_max must be >= 1");
        }
        if !(self.convergence_band > 0.0 && self.convergence_band < 1.0) {
            return bad("convergence_band must be in (0, 1)");
        }
        if self.baseline_probe_len == 0 {
            return bad("baseline_probe_len must be >= 1");
        }
        if self.history_len == 0 {
            return bad("history_len must be >= 1");
        }
        Ok(())
    }
}

/// A completed trial (or set interval) and its measured utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub k: usize,
    pub utility: f64,
}

impl Trial {
    pub fn new(k: usize, utility: f64) -> Self {
        Self { k, utility }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HillClimbStep {
    Next(usize),
    /// Utilities of the two trials agree within the convergence band.
    Converged,
}

/// Next `k` to test given the previous and current trials.
///
/// Rising utility keeps moving in the same direction; falling utility
/// reverses and steps back past `prev.k`. On the first trial of a phase
/// (`prev.k == curr.k`) the probe goes down when utility is below 1 and up
/// otherwise, flipping direction at the range boundary. The result is
/// clamped to `1..=k_max`.
pub fn hill_climb_next_k(prev: Trial, curr: Trial, k_max: usize, convergence_band: f64) -> HillClimbStep {
    let clamp = |k: i64| k.clamp(1, k_max as i64) as usize;
    let ck = curr.k as i64;
    if prev.k == curr.k {
        let (first, second) = if curr.utility < 1.0 {
            (ck - 1, ck + 1)
        } else {
            (ck + 1, ck - 1)
        };
        let in_range = |k: i64| k >= 1 && k <= k_max as i64;
        let next = if in_range(first) {
            first
        } else if in_range(second) {
            second
        } else {
            ck
        };
        return HillClimbStep::Next(clamp(next));
    }
    if (curr.utility - prev.utility).abs() < convergence_band * prev.utility {
        return HillClimbStep::Converged;
    }
    let dir = (ck - prev.k as i64).signum();
    let next = if curr.utility > prev.utility {
        ck + dir
    } else {
        prev.k as i64 - dir
    };
    HillClimbStep::Next(clamp(next))
}

/// Where the machine is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerPhase {
    /// Initial `k = 0` iterations that measure the baseline.
    BaselineWarmup {
        done: u32,
    },
    /// Scheduled baseline refresh between a set and the next test.
    BaselineProbe {
        done: u32,
    },
    Test {
        trial: u32,
        iters_done: u32,
    },
    Set {
        k: usize,
        remaining: u32,
    },
}

/// Outcome of [`Controller::end_of_trial`] and [`Controller::end_of_set`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    NextTrial { k: usize },
    EnterSet { k: usize, len: u32 },
    BeginTest { k: usize },
    BeginProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// Utility below 1 at `k = 1`.
    BelowOneAtMinimum,
    TrialLimit,
    ConsistentDecrease,
    Converged,
    /// The search has no untested neighbour left.
    Exhausted,
}

/// Audit log entry for a controller decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    /// Iterations completed when the decision was taken.
    pub iter: u64,
    pub phase: &'static str,
    pub trial_no: u32,
    pub k: usize,
    /// Utility that drove the decision, when there was one.
    pub utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<ExitReason>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    tokens: usize,
    time: f64,
    iters: u32,
}

impl Accum {
    fn add(&mut self, rec: &IterationRecord) {
        self.tokens += rec.tokens_emitted;
        self.time += rec.total_time;
        self.iters += 1;
    }

    fn utility(&self, t_base: f64) -> f64 {
        UtilitySnapshot::from_sums(self.tokens as f64, self.time, f64::from(self.iters), t_base).utility
    }
}

/// Utility-driven choice of the speculation length for one request.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    phase: ControllerPhase,
    curr_k: usize,
    last_trial: Option<Trial>,
    best: Option<Trial>,
    trials: Vec<Trial>,
    history: VecDeque<Trial>,
    backoff_level: u32,
    s_current: u32,
    probes: Vec<IterationRecord>,
    trial_acc: Accum,
    set_acc: Accum,
    pending_test_k: usize,
    iters: u64,
    last_refresh_iter: u64,
    events: Vec<ControllerEvent>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.set_len;
        Ok(Self {
            phase: ControllerPhase::BaselineWarmup { done: 0 },
            curr_k: 0,
            last_trial: None,
            best: None,
            trials: Vec::new(),
            history: VecDeque::with_capacity(cfg.history_len),
            backoff_level: 0,
            s_current: s,
            probes: Vec::new(),
            trial_acc: Accum::default(),
            set_acc: Accum::default(),
            pending_test_k: 0,
            iters: 0,
            last_refresh_iter: 0,
            events: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn phase(&self) -> ControllerPhase {
        self.phase
    }

    /// Speculation length for the upcoming iteration.
    pub fn current_k(&self) -> usize {
        self.curr_k
    }

    pub fn current_tag(&self) -> PhaseTag {
        match self.phase {
            ControllerPhase::BaselineWarmup { .. } | ControllerPhase::BaselineProbe { .. } => PhaseTag::BaselineProbe,
            ControllerPhase::Test { trial, .. } => PhaseTag::Test(trial),
            ControllerPhase::Set { .. } => PhaseTag::Set,
        }
    }

    /// Current set-phase length, `set_len * 2^backoff_level` capped at `set_cap`.
    pub fn s_current(&self) -> u32 {
        self.s_current
    }

    pub fn backoff_level(&self) -> u32 {
        self.backoff_level
    }

    pub fn history(&self) -> impl Iterator<Item = &Trial> {
        self.history.iter()
    }

    /// Best trial of the current (or just finished) test phase.
    pub fn best(&self) -> Option<Trial> {
        self.best
    }

    pub fn last_trial(&self) -> Option<Trial> {
        self.last_trial
    }

    pub fn events(&self) -> &[ControllerEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ControllerEvent> {
        std::mem::take(&mut self.events)
    }

    /// Positive `k` with the highest utility in the history, or the
    /// configured default when there is none.
    pub fn select_k_start(&self) -> usize {
        self.history
            .iter()
            .filter(|t| t.k > 0)
            .fold(None::<Trial>, |best, t| match best {
                Some(b) if b.utility >= t.utility => Some(b),
                _ => Some(*t),
            })
            .map(|t| t.k)
            .unwrap_or(self.cfg.k_start)
            .clamp(1, self.cfg.k_max)
    }

    /// Seeds the history, for example from an earlier request.
    pub fn push_history(&mut self, trial: Trial) {
        if self.history.len() == self.cfg.history_len {
            self.history.pop_front();
        }
        self.history.push_back(trial);
    }

    fn log(&mut self, phase: &'static str, trial_no: u32, k: usize, utility: Option<f64>, exit: Option<ExitReason>) {
        self.events.push(ControllerEvent {
            iter: self.iters,
            phase,
            trial_no,
            k,
            utility,
            exit,
        });
    }

    fn begin_test(&mut self, k: usize) -> Transition {
        let k = k.clamp(1, self.cfg.k_max);
        self.trials.clear();
        self.best = None;
        self.last_trial = None;
        self.trial_acc = Accum::default();
        self.curr_k = k;
        self.phase = ControllerPhase::Test {
            trial: 1,
            iters_done: 0,
        };
        self.log("test", 1, k, None, None);
        Transition::BeginTest { k }
    }

    fn enter_set(&mut self, k: usize, reason: ExitReason, utility: Option<f64>) -> Transition {
        if k == 0 {
            if self.cfg.adaptive_backoff {
                // Each drop to k = 0 doubles the set length, up to the cap.
                if self.s_current < self.cfg.set_cap {
                    self.backoff_level += 1;
                }
                self.s_current = (self.cfg.set_len << self.backoff_level).min(self.cfg.set_cap);
            }
        } else {
            self.backoff_level = 0;
            self.s_current = self.cfg.set_len;
        }
        self.curr_k = k;
        self.set_acc = Accum::default();
        self.phase = ControllerPhase::Set {
            k,
            remaining: self.s_current,
        };
        let trial_no = self.trials.len() as u32;
        self.log("set", trial_no, k, utility, Some(reason));
        Transition::EnterSet { k, len: self.s_current }
    }

    fn finish_test(&mut self, reason: ExitReason, converged_with: Option<Trial>) -> Transition {
        let Some(best) = self.best else {
            return self.enter_set(0, reason, None);
        };
        let mut chosen = best;
        // Within the convergence band the earlier-tested k wins.
        if let (Some(anchor), Some(curr)) = (converged_with, self.last_trial) {
            if curr == best && anchor.utility >= 1.0 {
                chosen = anchor;
            }
        }
        let k = if chosen.utility >= 1.0 { chosen.k } else { 0 };
        self.enter_set(k, reason, Some(chosen.utility))
    }

    /// Closes the trial that just ran at the current `k` with the measured
    /// utility and decides between another trial and the set phase.
    pub fn end_of_trial(&mut self, trial_utility: f64) -> Transition {
        let trial_no = match self.phase {
            ControllerPhase::Test { trial, .. } => trial,
            _ => self.trials.len() as u32 + 1,
        };
        let curr = Trial::new(self.curr_k, trial_utility);
        let anchor = self.best;
        self.push_history(curr);
        self.trials.push(curr);
        self.last_trial = Some(curr);
        if anchor.is_none_or(|b| curr.utility > b.utility) {
            self.best = Some(curr);
        }

        if trial_utility < 1.0 && curr.k == 1 {
            return self.finish_test(ExitReason::BelowOneAtMinimum, None);
        }
        if trial_no >= self.cfg.max_trials {
            return self.finish_test(ExitReason::TrialLimit, None);
        }
        if self.consistently_decreasing() {
            return self.finish_test(ExitReason::ConsistentDecrease, None);
        }
        let prev = anchor.unwrap_or(curr);
        match hill_climb_next_k(prev, curr, self.cfg.k_max, self.cfg.convergence_band) {
            HillClimbStep::Converged => self.finish_test(ExitReason::Converged, Some(prev)),
            HillClimbStep::Next(k) if self.trials.iter().any(|t| t.k == k) => {
                self.finish_test(ExitReason::Exhausted, None)
            }
            HillClimbStep::Next(k) => {
                self.curr_k = k;
                self.trial_acc = Accum::default();
                self.phase = ControllerPhase::Test {
                    trial: trial_no + 1,
                    iters_done: 0,
                };
                self.log("test", trial_no + 1, k, Some(trial_utility), None);
                Transition::NextTrial { k }
            }
        }
    }

    /// Two consecutive drops across the last three trials.
    fn consistently_decreasing(&self) -> bool {
        let n = self.trials.len();
        n >= 3
            && self.trials[n - 1].utility < self.trials[n - 2].utility
            && self.trials[n - 2].utility < self.trials[n - 3].utility
    }

    /// Closes a set phase and schedules the next test (after a baseline
    /// refresh when one is due). After a `k = 0` set the test restarts from
    /// `k = 1`; otherwise from the history's best `k`.
    pub fn end_of_set(&mut self, set_utility: Option<f64>) -> Transition {
        let set_k = match self.phase {
            ControllerPhase::Set { k, .. } => k,
            _ => self.curr_k,
        };
        if let Some(u) = set_utility {
            self.push_history(Trial::new(set_k, u));
        }
        let next = if set_k == 0 { 1 } else { self.select_k_start() };
        if self.iters.saturating_sub(self.last_refresh_iter) >= self.cfg.baseline_refresh_interval {
            self.pending_test_k = next;
            self.curr_k = 0;
            self.probes.clear();
            self.phase = ControllerPhase::BaselineProbe { done: 0 };
            self.log("baseline_probe", 0, 0, None, None);
            Transition::BeginProbe
        } else {
            self.begin_test(next)
        }
    }

    /// Consumes the record of the iteration that just ran with
    /// [`current_k`](Self::current_k) and returns `k` for the next one.
    pub fn next_k(&mut self, latest: &IterationRecord, analyzer: &mut UtilityAnalyzer) -> Result<usize> {
        self.iters += 1;
        match self.phase {
            ControllerPhase::BaselineWarmup { done } | ControllerPhase::BaselineProbe { done } => {
                self.probes.push(*latest);
                let done = done + 1;
                if done < self.cfg.baseline_probe_len {
                    self.phase = match self.phase {
                        ControllerPhase::BaselineWarmup { .. } => ControllerPhase::BaselineWarmup { done },
                        _ => ControllerPhase::BaselineProbe { done },
                    };
                } else {
                    let warmup = matches!(self.phase, ControllerPhase::BaselineWarmup { .. });
                    analyzer.refresh_baseline(&self.probes, self.iters)?;
                    self.probes.clear();
                    self.last_refresh_iter = self.iters;
                    let k = if warmup {
                        self.select_k_start()
                    } else {
                        self.pending_test_k
                    };
                    self.begin_test(k);
                }
            }
            ControllerPhase::Test { trial, iters_done } => {
                self.trial_acc.add(latest);
                let iters_done = iters_done + 1;
                if iters_done < self.cfg.trial_len {
                    self.phase = ControllerPhase::Test { trial, iters_done };
                } else {
                    let u = self.trial_acc.utility(analyzer.t_base()?);
                    self.end_of_trial(u);
                }
            }
            ControllerPhase::Set { k, remaining } => {
                self.set_acc.add(latest);
                if remaining > 1 {
                    self.phase = ControllerPhase::Set {
                        k,
                        remaining: remaining - 1,
                    };
                } else {
                    let u = self.set_acc.utility(analyzer.t_base()?);
                    self.end_of_set(Some(u));
                }
            }
        }
        Ok(self.curr_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(k: usize, u: f64) -> Trial {
        Trial::new(k, u)
    }

    fn ctl() -> Controller {
        Controller::new(ControllerConfig::default()).unwrap()
    }

    /// Puts a fresh controller into its first test phase at `k`.
    fn testing_at(k: usize) -> Controller {
        let mut c = ctl();
        c.begin_test(k);
        c
    }

    #[test]
    fn k_start_from_history() {
        let mut c = ctl();
        assert_eq!(c.select_k_start(), 3);
        c.push_history(t(0, 1.0));
        assert_eq!(c.select_k_start(), 3);
        c.push_history(t(1, 1.1));
        c.push_history(t(2, 1.4));
        assert_eq!(c.select_k_start(), 2);
    }

    #[test]
    fn hill_climb_directions() {
        assert_eq!(hill_climb_next_k(t(1, 1.1), t(2, 1.3), 3, 0.1), HillClimbStep::Next(3));
        assert_eq!(hill_climb_next_k(t(2, 1.3), t(3, 1.1), 3, 0.1), HillClimbStep::Next(1));
        assert_eq!(
            hill_climb_next_k(t(2, 1.30), t(3, 1.28), 3, 0.1),
            HillClimbStep::Converged
        );
        // first trial
        assert_eq!(hill_climb_next_k(t(3, 0.8), t(3, 0.8), 7, 0.1), HillClimbStep::Next(2));
        assert_eq!(hill_climb_next_k(t(3, 1.2), t(3, 1.2), 7, 0.1), HillClimbStep::Next(4));
        assert_eq!(hill_climb_next_k(t(3, 1.2), t(3, 1.2), 3, 0.1), HillClimbStep::Next(2));
        // clamping
        assert_eq!(hill_climb_next_k(t(2, 1.0), t(1, 1.5), 3, 0.1), HillClimbStep::Next(1));
        assert_eq!(hill_climb_next_k(t(2, 1.0), t(3, 1.5), 3, 0.1), HillClimbStep::Next(3));
    }

    #[test]
    fn below_one_at_k1_disables() {
        let mut c = testing_at(1);
        assert_eq!(c.end_of_trial(0.8), Transition::EnterSet { k: 0, len: 32 });
    }

    #[test]
    fn trial_limit_picks_best() {
        let mut c = ctl();
        c.cfg.max_trials = 3;
        c.begin_test(3);
        assert_eq!(c.end_of_trial(1.2), Transition::NextTrial { k: 2 });
        assert_eq!(c.end_of_trial(1.5), Transition::NextTrial { k: 1 });
        assert_eq!(c.end_of_trial(1.3), Transition::EnterSet { k: 2, len: 16 });
    }

    #[test]
    fn falling_below_one_everywhere_disables() {
        let mut c = testing_at(3);
        assert_eq!(c.end_of_trial(0.9), Transition::NextTrial { k: 2 });
        // (2, 0.8) is worse than (3, 0.9): reverse past 3 to 4, clamped to 3 which was tested.
        assert_eq!(c.end_of_trial(0.8), Transition::EnterSet { k: 0, len: 32 });
    }

    #[test]
    fn converged_pair_prefers_earlier_trial() {
        let mut c = testing_at(2);
        assert_eq!(c.end_of_trial(1.30), Transition::NextTrial { k: 3 });
        assert_eq!(c.end_of_trial(1.35), Transition::EnterSet { k: 2, len: 16 });
    }

    #[test]
    fn backoff_doubles_then_resets() {
        let mut c = ctl();
        let mut lens = Vec::new();
        for _ in 0..6 {
            c.begin_test(1);
            match c.end_of_trial(0.5) {
                Transition::EnterSet { k: 0, len } => lens.push(len),
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(lens, vec![32, 64, 128, 256, 256, 256]);
        assert_eq!(c.s_current(), 256);
        c.begin_test(2);
        c.end_of_trial(1.5);
        c.end_of_trial(1.2);
        assert_eq!(c.end_of_trial(1.1), Transition::EnterSet { k: 2, len: 16 });
        assert_eq!(c.backoff_level(), 0);
    }

    #[test]
    fn backoff_disabled_keeps_set_len() {
        let mut c = Controller::new(ControllerConfig {
            adaptive_backoff: false,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..4 {
            c.begin_test(1);
            assert_eq!(c.end_of_trial(0.5), Transition::EnterSet { k: 0, len: 16 });
        }
    }

    #[test]
    fn end_of_set_restarts_from_one_after_disable() {
        let mut c = testing_at(1);
        c.end_of_trial(0.5);
        assert_eq!(c.end_of_set(Some(1.0)), Transition::BeginTest { k: 1 });
        c.end_of_trial(1.4);
        // (1, 1.4) then (2, ?) ...
        c.end_of_trial(1.6);
        c.end_of_trial(1.5);
        assert!(matches!(c.phase(), ControllerPhase::Set { k: 2, .. }));
        assert_eq!(c.end_of_set(Some(1.6)), Transition::BeginTest { k: 2 });
    }

    #[test]
    fn config_validation() {
        let bad = [
            ControllerConfig {
                trial_len: 0,
                ..Default::default()
            },
            ControllerConfig {
                max_trials: 0,
                ..Default::default()
            },
            ControllerConfig {
                set_len: 2,
                ..Default::default()
            },
            ControllerConfig {
                k_max: 0,
                ..Default::default()
            },
            ControllerConfig {
                convergence_band: 1.0,
                ..Default::default()
            },
            ControllerConfig {
                set_cap: 8,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(Controller::new(cfg).is_err());
        }
    }

    #[test]
    fn warmup_then_first_trial_at_k_start() {
        let mut c = ctl();
        let mut a = UtilityAnalyzer::default();
        let mut ks = vec![c.current_k()];
        for i in 0..4 {
            let rec = IterationRecord::simple(i, c.current_k(), 1, 1.0, c.current_tag());
            ks.push(c.next_k(&rec, &mut a).unwrap());
        }
        assert_eq!(ks, vec![0, 0, 0, 0, 3]);
        assert_eq!(c.current_tag(), PhaseTag::Test(1));
        assert_eq!(a.t_base().unwrap(), 1.0);
    }
}
