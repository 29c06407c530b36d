//! Drafter acceptance behaviour and request streams.
//!
//! Within a phase every draft token is accepted independently with the
//! phase's probability, and acceptance is causal: the first rejection
//! discards the rest of the draft. Phases last a geometric number of
//! iterations and switch cyclically or by a Markov chain, which gives
//! windowed utility its short-range locality.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptancePhase {
    #[serde(alias = "accept")]
    pub per_token_accept_prob: f64,
    /// Mean phase length in iterations (geometrically distributed).
    #[serde(default = "one")]
    pub mean_duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity_override: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl AcceptancePhase {
    pub fn constant(p: f64) -> Self {
        Self {
            per_token_accept_prob: p,
            mean_duration: 1.0,
            affinity_override: None,
        }
    }

    pub fn new(p: f64, mean_duration: f64) -> Self {
        Self {
            per_token_accept_prob: p,
            mean_duration,
            affinity_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTransition {
    /// Phases run in listed order and wrap around.
    Cyclic,
    /// Row `i` gives the probabilities of the phase that follows phase `i`.
    Markov(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLen {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

impl OutputLen {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            OutputLen::Fixed(n) => n,
            OutputLen::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            OutputLen::Fixed(n) => f64::from(n),
            OutputLen::Uniform { min, max } => (f64::from(min) + f64::from(max)) / 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OutputLen::Fixed(n) if n >= 1 => Ok(()),
            OutputLen::Uniform { min, max } if min >= 1 && min <= max => Ok(()),
            _ => Err(Error::config(format!(
                "output length {self:?} must be >= 1 with min <= max"
            ))),
        }
    }
}

/// A task's acceptance behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub name: String,
    pub phases: Vec<AcceptancePhase>,
    #[serde(default = "cyclic")]
    pub phase_transition: PhaseTransition,
    pub output_len: OutputLen,
    /// The task's own routing reuse tendency, combined with the model's.
    #[serde(default)]
    pub expert_affinity: f64,
    /// Start each request in a random phase (weighted by mean duration)
    /// instead of the first one.
    #[serde(default)]
    pub random_start: bool,
}

fn cyclic() -> PhaseTransition {
    PhaseTransition::Cyclic
}

impl WorkloadProfile {
    /// Single phase with a fixed acceptance probability.
    pub fn constant(name: impl Into<String>, p: f64, output_len: u32) -> Self {
        Self {
            name: name.into(),
            phases: vec![AcceptancePhase::constant(p)],
            phase_transition: PhaseTransition::Cyclic,
            output_len: OutputLen::Fixed(output_len),
            expert_affinity: 0.0,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |m: String| Error::config(format!("profile `{}`: {m}", self.name));
        if self.phases.is_empty() {
            return Err(ctx("needs at least one phase".into()));
        }
        for (i, ph) in self.phases.iter().enumerate() {
            if !(0.0..=1.0).contains(&ph.per_token_accept_prob) {
                return Err(ctx(format!("phase {i}: accept probability must be in [0, 1]")));
            }
            if !(ph.mean_duration >= 1.0 && ph.mean_duration.is_finite()) {
                return Err(ctx(format!("phase {i}: mean_duration must be >= 1")));
            }
            if let Some(a) = ph.affinity_override {
                if !(0.0..=1.0).contains(&a) {
                    return Err(ctx(format!("phase {i}: affinity_override must be in [0, 1]")));
                }
            }
        }
        if let PhaseTransition::Markov(m) = &self.phase_transition {
            if m.len() != self.phases.len() || m.iter().any(|row| row.len() != self.phases.len()) {
                return Err(ctx("markov matrix must be square with one row per phase".into()));
            }
            for row in m {
                let s: f64 = row.iter().sum();
                if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(ctx("markov rows must be non-negative and sum to 1".into()));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.expert_affinity) {
            return Err(ctx("expert_affinity must be in [0, 1]".into()));
        }
        self.output_len.validate().map_err(|e| ctx(e.to_string()))
    }
}

/// Per-request position within a profile's phase structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileState {
    pub phase: usize,
    /// Iterations left in the current phase, counting the current one.
    pub remaining: u64,
}

fn sample_duration<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 1.0 {
        return 1;
    }
    // Geometric on {1, 2, ...} with the requested mean.
    let g = Geometric::new(1.0 / mean).expect("valid geometric parameter");
    1 + g.sample(rng)
}

impl ProfileState {
    pub fn start<R: Rng + ?Sized>(profile: &WorkloadProfile, rng: &mut R) -> Self {
        let phase = if profile.random_start && profile.phases.len() > 1 {
            let total: f64 = profile.phases.iter().map(|p| p.mean_duration).sum();
            let mut x = rng.random::<f64>() * total;
            let mut chosen = profile.phases.len() - 1;
            for (i, p) in profile.phases.iter().enumerate() {
                if x < p.mean_duration {
                    chosen = i;
                    break;
                }
                x -= p.mean_duration;
            }
            chosen
        } else {
            0
        };
        Self {
            phase,
            remaining: sample_duration(profile.phases[phase].mean_duration, rng),
        }
    }

    pub fn accept_prob(&self, profile: &WorkloadProfile) -> f64 {
        profile.phases[self.phase].per_token_accept_prob
    }

    /// Routing affinity in effect for the current phase.
    pub fn affinity(&self, profile: &WorkloadProfile) -> f64 {
        profile.phases[self.phase]
            .affinity_override
            .unwrap_or(profile.expert_affinity)
    }
}

/// Draft tokens accepted in one iteration with `k` drafts: the length of the
/// accepted prefix under i.i.d. per-token acceptance.
pub fn sample_accepted<R: Rng + ?Sized>(
    state: &ProfileState,
    profile: &WorkloadProfile,
    k: usize,
    rng: &mut R,
) -> usize {
    let p = state.accept_prob(profile);
    if p >= 1.0 {
        return k;
    }
    if p <= 0.0 {
        return 0;
    }
    (0..k).take_while(|_| rng.random::<f64>() < p).count()
}

/// Moves one iteration forward through the profile's phases.
pub fn advance_phase<R: Rng + ?Sized>(state: ProfileState, profile: &WorkloadProfile, rng: &mut R) -> ProfileState {
    if profile.phases.len() == 1 {
        return state;
    }
    if state.remaining > 1 {
        return ProfileState {
            remaining: state.remaining - 1,
            ..state
        };
    }
    let next = match &profile.phase_transition {
        PhaseTransition::Cyclic => (state.phase + 1) % profile.phases.len(),
        PhaseTransition::Markov(m) => {
            let row = &m[state.phase];
            let mut x = rng.random::<f64>();
            let mut chosen = row.len() - 1;
            for (i, p) in row.iter().enumerate() {
                if x < *p {
                    chosen = i;
                    break;
                }
                x -= p;
            }
            chosen
        }
    };
    ProfileState {
        phase: next,
        remaining: sample_duration(profile.phases[next].mean_duration, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamBudget {
    Requests(u64),
    /// Stop once the issued requests' output lengths reach this many tokens.
    Tokens(u64),
}

/// One request drawn from a stream.
#[derive(Debug, Clone)]
pub struct RequestSpec {
    pub index: u64,
    pub profile: Arc<WorkloadProfile>,
    pub output_len: u32,
    /// Seed for the request's own random streams (phases, acceptance, routing).
    pub seed: u64,
}

/// A seeded stream of requests drawn from a task mix.
#[derive(Debug, Clone)]
pub struct RequestStream {
    mix: Vec<(Arc<WorkloadProfile>, f64)>,
    budget: StreamBudget,
    rng: ChaCha8Rng,
    issued_requests: u64,
    issued_tokens: u64,
}

impl RequestStream {
    pub fn new(mix: Vec<(WorkloadProfile, f64)>, budget: StreamBudget, seed: u64) -> Result<Self> {
        if mix.is_empty() {
            return Err(Error::config("request mix is empty"));
        }
        for (p, share) in &mix {
            p.validate()?;
            if share.is_nan() || *share < 0.0 {
                return Err(Error::config(format!("share of `{}` must be >= 0", p.name)));
            }
        }
        let total: f64 = mix.iter().map(|(_, s)| s).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("mix shares sum to {total}, expected 1")));
        }
        Ok(Self {
            mix: mix.into_iter().map(|(p, s)| (Arc::new(p), s)).collect(),
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
            issued_requests: 0,
            issued_tokens: 0,
        })
    }

    pub fn single(profile: WorkloadProfile, budget: StreamBudget, seed: u64) -> Result<Self> {
        Self::new(vec![(profile, 1.0)], budget, seed)
    }

    pub fn mix(&self) -> &[(Arc<WorkloadProfile>, f64)] {
        &self.mix
    }

    pub fn exhausted(&self) -> bool {
        match self.budget {
            StreamBudget::Requests(n) => self.issued_requests >= n,
            StreamBudget::Tokens(n) => self.issued_tokens >= n,
        }
    }

    pub fn next_request(&mut self) -> Result<RequestSpec> {
        if self.exhausted() {
            return Err(Error::StreamExhausted);
        }
        let mut x = self.rng.random::<f64>();
        let mut chosen = self.mix.len() - 1;
        for (i, (_, share)) in self.mix.iter().enumerate() {
            if x < *share {
                chosen = i;
                break;
            }
            x -= share;
        }
        let profile = Arc::clone(&self.mix[chosen].0);
        let output_len = profile.output_len.sample(&mut self.rng);
        let seed = self.rng.random::<u64>();
        let index = self.issued_requests;
        self.issued_requests += 1;
        self.issued_tokens += u64::from(output_len);
        Ok(RequestSpec {
            index,
            profile,
            output_len,
            seed,
        })
    }
}

impl Iterator for RequestStream {
    type Item = RequestSpec;

    fn next(&mut self) -> Option<RequestSpec> {
        self.next_request().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn perfect_and_hopeless_drafters() {
        let mut r = rng(1);
        let good = WorkloadProfile::constant("good", 1.0, 10);
        let bad = WorkloadProfile::constant("bad", 0.0, 10);
        let s = ProfileState::start(&good, &mut r);
        assert_eq!(sample_accepted(&s, &good, 3, &mut r), 3);
        assert_eq!(sample_accepted(&s, &bad, 3, &mut r), 0);
        assert_eq!(sample_accepted(&s, &good, 0, &mut r), 0);
    }

    #[test]
    fn prefix_acceptance_mean() {
        // E[emitted] = 1 + p + p^2 + p^3 for k = 3
        let profile = WorkloadProfile::constant("p06", 0.6, 10);
        let mut r = rng(2);
        let s = ProfileState::start(&profile, &mut r);
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_accepted(&s, &profile, 3, &mut r) + 1).sum();
        let mean = total as f64 / n as f64;
        assert_relative_eq!(mean, 2.176, max_relative = 0.01);
    }

    #[test]
    fn single_phase_never_moves() {
        let profile = WorkloadProfile::constant("x", 0.5, 10);
        let mut r = rng(3);
        let s0 = ProfileState::start(&profile, &mut r);
        let mut s = s0;
        for _ in 0..1000 {
            s = advance_phase(s, &profile, &mut r);
        }
        assert_eq!(s, s0);
    }

    fn two_phase(transition: PhaseTransition, d0: f64, d1: f64) -> WorkloadProfile {
        WorkloadProfile {
            name: "two".into(),
            phases: vec![AcceptancePhase::new(0.9, d0), AcceptancePhase::new(0.1, d1)],
            phase_transition: transition,
            output_len: OutputLen::Fixed(100),
            expert_affinity: 0.0,
            random_start: false,
        }
    }

    fn phase0_share(profile: &WorkloadProfile, iters: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut s = ProfileState::start(profile, &mut r);
        let mut hits = 0usize;
        for _ in 0..iters {
            if s.phase == 0 {
                hits += 1;
            }
            s = advance_phase(s, profile, &mut r);
        }
        hits as f64 / iters as f64
    }

    #[test]
    fn cyclic_phases_split_time_by_mean_duration() {
        let profile = two_phase(PhaseTransition::Cyclic, 50.0, 50.0);
        let share = phase0_share(&profile, 100_000, 4);
        assert!((share - 0.5).abs() <= 0.02, "share {share}");
    }

    #[test]
    fn markov_phases_hit_stationary_share() {
        let m = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let profile = two_phase(PhaseTransition::Markov(m), 1.0, 1.0);
        let share = phase0_share(&profile, 100_000, 5);
        assert!((share - 2.0 / 3.0).abs() <= 0.02, "share {share}");
    }

    #[test]
    fn profile_validation() {
        let mut p = two_phase(PhaseTransition::Markov(vec![vec![0.5, 0.4], vec![0.2, 0.8]]), 1.0, 1.0);
        assert!(p.validate().is_err());
        p.phase_transition = PhaseTransition::Cyclic;
        p.validate().unwrap();
        p.phases[0].mean_duration = 0.5;
        assert!(p.validate().is_err());
        p.phases.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn stream_single_profile_and_exhaustion() {
        let mut s =
            RequestStream::single(WorkloadProfile::constant("code", 0.5, 7), StreamBudget::Requests(3), 9).unwrap();
        for _ in 0..3 {
            let r = s.next_request().unwrap();
            assert_eq!(r.profile.name, "code");
            assert_eq!(r.output_len, 7);
        }
        assert!(matches!(s.next_request(), Err(Error::StreamExhausted)));
    }

    #[test]
    fn stream_token_budget() {
        let s = RequestStream::single(WorkloadProfile::constant("c", 0.5, 100), StreamBudget::Tokens(250), 1).unwrap();
        assert_eq!(s.count(), 3);
    }

    #[test]
    fn stream_shares_must_sum_to_one() {
        let mix = vec![
            (WorkloadProfile::constant("a", 0.5, 1), 0.5),
            (WorkloadProfile::constant("b", 0.5, 1), 0.6),
        ];
        assert!(RequestStream::new(mix, StreamBudget::Requests(1), 0).is_err());
    }

    #[test]
    fn two_way_mix_shares() {
        let mix = vec![
            (WorkloadProfile::constant("code", 0.5, 1), 0.5),
            (WorkloadProfile::constant("math", 0.5, 1), 0.5),
        ];
        let s = RequestStream::new(mix, StreamBudget::Requests(10_000), 11).unwrap();
        let code = s.filter(|r| r.profile.name == "code").count();
        assert!((code as f64 / 10_000.0 - 0.5).abs() <= 0.02);
    }
}
