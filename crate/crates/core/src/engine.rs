//! The iteration loop and scenario runner.
//!
//! Each request runs back to back with its own random streams and, for the
//! adaptive policy, its own controller. Cells (model x task x policy x seed)
//! are independent and run in parallel; results keep input order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::{harmonic_mean, IterationRecord, PhaseTag, UtilityAnalyzer, UtilitySnapshot};
use crate::controller::{Controller, ControllerConfig, ControllerEvent};
use crate::cost_model::CostModel;
use crate::error::{Error, Result};
use crate::fixtures::Task;
use crate::trace::AcceptanceTrace;
use crate::workload::{
    advance_phase, sample_accepted, ProfileState, RequestSpec, RequestStream, StreamBudget, WorkloadProfile,
};

/// How a run picks its speculation length.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    None,
    Static(usize),
    Adaptive(ControllerConfig),
}

impl Policy {
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Policy::None)
    }

    pub fn validate(&self, k_max: usize) -> Result<()> {
        match self {
            Policy::Static(k) if *k > k_max => Err(Error::config(format!("static:{k} exceeds k_max = {k_max}"))),
            Policy::Adaptive(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    /// Parses a comma-separated policy list. Accepts `none`, `adaptive`,
    /// `static:K` and ranges `static:A..B` (inclusive).
    pub fn parse_list(text: &str, controller: &ControllerConfig) -> Result<Vec<Policy>> {
        let mut out = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            out.extend(Self::parse_one(item, controller)?);
        }
        if out.is_empty() {
            return Err(Error::config("policy list is empty"));
        }
        Ok(out)
    }

    fn parse_one(item: &str, controller: &ControllerConfig) -> Result<Vec<Policy>> {
        let bad = || Error::UnknownName {
            kind: "policy",
            name: item.to_string(),
        };
        match item {
            "none" => return Ok(vec![Policy::None]),
            "adaptive" => return Ok(vec![Policy::Adaptive(controller.clone())]),
            _ => {}
        }
        let arg = item.strip_prefix("static:").ok_or_else(bad)?;
        if let Some((a, b)) = arg.split_once("..") {
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            return Ok((a..=b).map(Policy::Static).collect());
        }
        Ok(vec![Policy::Static(arg.parse().map_err(|_| bad())?)])
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::None => f.write_str("none"),
            Policy::Static(k) => write!(f, "static:{k}"),
            Policy::Adaptive(_) => f.write_str("adaptive"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Self::parse_one(s.trim(), &ControllerConfig::default())?;
        if v.len() != 1 {
            return Err(Error::config(format!("`{s}` names more than one policy")));
        }
        Ok(v.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Each iteration's time is scaled by a uniform factor in
    /// `1 +/- timing_jitter`.
    pub timing_jitter: f64,
    pub window_len: usize,
    /// `k = 0` probes measured before a non-adaptive run to estimate its baseline.
    pub offline_probes: u32,
    pub telemetry: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            timing_jitter: 0.0,
            window_len: crate::analyzer::DEFAULT_WINDOW_LEN,
            offline_probes: 4,
            telemetry: false,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.timing_jitter) {
            return Err(Error::config("timing_jitter must be in [0, 1)"));
        }
        if self.offline_probes == 0 {
            return Err(Error::config("offline_probes must be >= 1"));
        }
        Ok(())
    }
}

/// Per-iteration telemetry. Every figure in a report can be recomputed
/// from these lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TelemetryEvent {
    OfflineProbe {
        request: u64,
        time: f64,
    },
    Iteration {
        request: u64,
        iter: u64,
        k: usize,
        accepted: usize,
        tokens: usize,
        draft_time: f64,
        verify_time: f64,
        sampling_time: f64,
        total_time: f64,
        phase: PhaseTag,
        active_experts: f64,
    },
    Decision {
        request: u64,
        #[serde(flatten)]
        event: ControllerEvent,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub request: u64,
    pub task: String,
    pub tokens: u64,
    pub iterations: u64,
    /// Iterations that ran with `k >= 1`.
    pub spec_iterations: u64,
    pub k_sum: u64,
    pub total_time: f64,
    pub draft_time: f64,
    pub verify_time: f64,
    pub sampling_time: f64,
    /// Mean of the `k = 0` probe times behind this request's baseline.
    pub t_base: f64,
    #[serde(skip)]
    pub telemetry: Vec<TelemetryEvent>,
}

impl RequestMetrics {
    pub fn tpot(&self) -> f64 {
        self.total_time / self.tokens as f64
    }

    pub fn etr(&self) -> f64 {
        self.tokens as f64 / self.iterations as f64
    }

    pub fn cost(&self) -> f64 {
        self.snapshot().cost
    }

    pub fn utility(&self) -> f64 {
        self.snapshot().utility
    }

    pub fn snapshot(&self) -> UtilitySnapshot {
        UtilitySnapshot::from_sums(self.tokens as f64, self.total_time, self.iterations as f64, self.t_base)
    }
}

/// Where accepted counts come from.
trait AcceptSource {
    fn done(&self, iter: u64, tokens: u64) -> bool;
    fn affinity(&self) -> f64;
    fn accepted(&mut self, iter: u64, k: usize) -> Result<usize>;
    fn advance(&mut self);
}

struct Synthetic<'a> {
    profile: &'a WorkloadProfile,
    state: ProfileState,
    output_len: u64,
    accept_rng: ChaCha8Rng,
    phase_rng: ChaCha8Rng,
}

impl AcceptSource for Synthetic<'_> {
    fn done(&self, _iter: u64, tokens: u64) -> bool {
        tokens >= self.output_len
    }

    fn affinity(&self) -> f64 {
        self.state.affinity(self.profile)
    }

    fn accepted(&mut self, _iter: u64, k: usize) -> Result<usize> {
        Ok(sample_accepted(&self.state, self.profile, k, &mut self.accept_rng))
    }

    fn advance(&mut self) {
        self.state = advance_phase(self.state, self.profile, &mut self.phase_rng);
    }
}

struct Replay<'a> {
    trace: &'a AcceptanceTrace,
    request: u64,
    iterations: u64,
    affinity: f64,
}

impl AcceptSource for Replay<'_> {
    fn done(&self, iter: u64, _tokens: u64) -> bool {
        iter >= self.iterations
    }

    fn affinity(&self) -> f64 {
        self.affinity
    }

    fn accepted(&mut self, iter: u64, k: usize) -> Result<usize> {
        Ok(self.trace.replay_acceptance(self.request, iter, k as u64)? as usize)
    }

    fn advance(&mut self) {}
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const ACCEPT_STREAM: u64 = 1;
const PHASE_STREAM: u64 = 2;
const COST_STREAM: u64 = 3;
const PROBE_STREAM: u64 = 4;

fn drive(
    model: &dyn CostModel,
    policy: &Policy,
    opts: &SimOptions,
    seed: u64,
    request: u64,
    task: &str,
    source: &mut dyn AcceptSource,
) -> Result<RequestMetrics> {
    let mut cost_rng = stream_rng(seed, COST_STREAM);
    let mut m = RequestMetrics {
        request,
        task: task.to_string(),
        ..Default::default()
    };
    let jitter = |rng: &mut ChaCha8Rng| {
        if opts.timing_jitter > 0.0 {
            1.0 + opts.timing_jitter * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            1.0
        }
    };

    let mut controller = match policy {
        Policy::Adaptive(cfg) => Some(Controller::new(cfg.clone())?),
        _ => None,
    };
    let mut analyzer = UtilityAnalyzer::new(opts.window_len);
    let (mut probe_sum, mut probe_n) = (0.0, 0u64);
    if controller.is_none() {
        let mut probe_rng = stream_rng(seed, PROBE_STREAM);
        for _ in 0..opts.offline_probes {
            let c = model.iteration_cost(0, source.affinity(), &mut probe_rng);
            let time = c.total * jitter(&mut probe_rng);
            probe_sum += time;
            probe_n += 1;
            if opts.telemetry {
                m.telemetry.push(TelemetryEvent::OfflineProbe { request, time });
            }
        }
    }

    let mut iter = 0u64;
    while !source.done(iter, m.tokens) {
        let (k, tag) = match &controller {
            Some(c) => (c.current_k(), c.current_tag()),
            None => match policy {
                Policy::Static(k) => (*k, PhaseTag::Set),
                _ => (0, PhaseTag::Set),
            },
        };
        let raw = model.iteration_cost(k, source.affinity(), &mut cost_rng);
        let cost = raw.scaled(jitter(&mut cost_rng));
        let accepted = if k == 0 { 0 } else { source.accepted(iter, k)?.min(k) };
        let rec = IterationRecord::new(iter, k, accepted + 1, &cost, tag);

        m.tokens += rec.tokens_emitted as u64;
        m.iterations += 1;
        m.total_time += rec.total_time;
        m.draft_time += rec.draft_time;
        m.verify_time += rec.verify_time;
        m.sampling_time += rec.sampling_time;
        m.k_sum += k as u64;
        if k > 0 {
            m.spec_iterations += 1;
        }
        if tag == PhaseTag::BaselineProbe {
            probe_sum += rec.total_time;
            probe_n += 1;
        }
        if opts.telemetry {
            m.telemetry.push(TelemetryEvent::Iteration {
                request,
                iter,
                k,
                accepted,
                tokens: rec.tokens_emitted,
                draft_time: rec.draft_time,
                verify_time: rec.verify_time,
                sampling_time: rec.sampling_time,
                total_time: rec.total_time,
                phase: tag,
                active_experts: cost.active_experts_per_layer,
            });
        }

        analyzer.record(rec);
        if let Some(c) = controller.as_mut() {
            c.next_k(&rec, &mut analyzer)?;
            if opts.telemetry {
                m.telemetry.extend(
                    c.take_events()
                        .into_iter()
                        .map(|event| TelemetryEvent::Decision { request, event }),
                );
            }
        }
        source.advance();
        iter += 1;
    }
    m.t_base = if probe_n > 0 {
        probe_sum / probe_n as f64
    } else {
        model.baseline_iter_time()
    };
    Ok(m)
}

/// Runs one request of a synthetic workload to completion.
pub fn run_request(
    model: &dyn CostModel,
    request: &RequestSpec,
    policy: &Policy,
    opts: &SimOptions,
) -> Result<RequestMetrics> {
    let profile = request.profile.as_ref();
    let mut phase_rng = stream_rng(request.seed, PHASE_STREAM);
    let state = ProfileState::start(profile, &mut phase_rng);
    let mut source = Synthetic {
        profile,
        state,
        output_len: u64::from(request.output_len),
        accept_rng: stream_rng(request.seed, ACCEPT_STREAM),
        phase_rng,
    };
    drive(
        model,
        policy,
        opts,
        request.seed,
        request.index,
        &profile.name,
        &mut source,
    )
}

/// Replays every request of a trace with `policy`. Each request runs for
/// exactly its recorded number of iterations.
pub fn replay_trace(
    model: &dyn CostModel,
    trace: &AcceptanceTrace,
    policy: &Policy,
    opts: &SimOptions,
    task_affinity: f64,
    seed: u64,
) -> Result<Vec<RequestMetrics>> {
    trace
        .request_ids()
        .iter()
        .map(|&id| {
            let mut source = Replay {
                trace,
                request: id,
                iterations: trace.iterations(id),
                affinity: task_affinity,
            };
            drive(
                model,
                policy,
                opts,
                mix_seed(seed, &id.to_le_bytes()),
                id,
                "trace",
                &mut source,
            )
        })
        .collect()
}

/// Acceptance trace of the iterations in a telemetry stream.
pub fn trace_from_telemetry<'a>(events: impl IntoIterator<Item = &'a TelemetryEvent>) -> Result<AcceptanceTrace> {
    let records = events
        .into_iter()
        .filter_map(|e| match *e {
            TelemetryEvent::Iteration {
                request,
                iter,
                k,
                accepted,
                ..
            } => Some(crate::trace::TraceRecord {
                request_id: request,
                iter,
                k_offered: k as u64,
                accepted: accepted as u64,
            }),
            _ => None,
        })
        .collect();
    AcceptanceTrace::from_records(records)
}

/// Folds bytes into a seed (splitmix64 finalizer per byte chunk).
pub fn mix_seed(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for chunk in bytes.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h ^= u64::from_le_bytes(buf);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Totals over a set of requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: u64,
    pub tokens: u64,
    pub iterations: u64,
    pub spec_iterations: u64,
    pub total_time: f64,
    /// Iteration-weighted mean of the per-request baselines.
    pub t_base: f64,
    pub tpot: f64,
    pub etr: f64,
    pub cost: f64,
    pub utility: f64,
    /// Harmonic mean of per-request utilities.
    pub hm_utility: f64,
    pub mean_k: f64,
}

impl Aggregate {
    pub fn from_requests(reqs: &[RequestMetrics]) -> Self {
        let mut a = Aggregate {
            requests: reqs.len() as u64,
            ..Default::default()
        };
        let mut k_sum = 0;
        let mut weighted_base = 0.0;
        for r in reqs {
            a.tokens += r.tokens;
            a.iterations += r.iterations;
            a.spec_iterations += r.spec_iterations;
            a.total_time += r.total_time;
            k_sum += r.k_sum;
            weighted_base += r.t_base * r.iterations as f64;
        }
        if a.iterations == 0 {
            return a;
        }
        a.t_base = weighted_base / a.iterations as f64;
        let s = UtilitySnapshot::from_sums(a.tokens as f64, a.total_time, a.iterations as f64, a.t_base);
        a.tpot = a.total_time / a.tokens as f64;
        a.etr = s.etr;
        a.cost = s.cost;
        a.utility = s.utility;
        a.mean_k = k_sum as f64 / a.iterations as f64;
        let utils: Vec<f64> = reqs.iter().filter(|r| r.iterations > 0).map(|r| r.utility()).collect();
        a.hm_utility = harmonic_mean(&utils).unwrap_or(0.0);
        a
    }
}

/// One cell of a scenario.
#[derive(Clone)]
pub struct CellSpec {
    pub model: Arc<dyn CostModel>,
    pub task: Task,
    pub policy: Policy,
    pub seed: u64,
    pub budget: StreamBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub task: String,
    pub policy: String,
    pub seed: u64,
    #[serde(flatten)]
    pub agg: Aggregate,
    /// `TPOT(none) / TPOT(policy)` for the same model, task and seed.
    pub speedup: Option<f64>,
    pub error: Option<String>,
}

pub struct CellRun {
    pub result: CellResult,
    pub requests: Vec<RequestMetrics>,
}

pub fn run_cell(spec: &CellSpec, opts: &SimOptions) -> CellRun {
    let mut result = CellResult {
        model: spec.model.name().to_string(),
        task: spec.task.name.clone(),
        policy: spec.policy.label(),
        seed: spec.seed,
        agg: Aggregate::default(),
        speedup: None,
        error: None,
    };
    let run = || -> Result<Vec<RequestMetrics>> {
        let stream = RequestStream::new(
            spec.task.mix.clone(),
            spec.budget,
            mix_seed(spec.seed, spec.task.name.as_bytes()),
        )?;
        stream
            .map(|req| run_request(spec.model.as_ref(), &req, &spec.policy, opts))
            .collect()
    };
    match run() {
        Ok(requests) => {
            result.agg = Aggregate::from_requests(&requests);
            CellRun { result, requests }
        }
        Err(e) => {
            result.error = Some(e.to_string());
            CellRun {
                result,
                requests: Vec::new(),
            }
        }
    }
}

/// Runs cells in parallel on the current rayon pool; output follows input order.
pub fn run_cells(specs: &[CellSpec], opts: &SimOptions) -> Vec<CellRun> {
    specs.par_iter().map(|s| run_cell(s, opts)).collect()
}

/// Worst and mean speedup of a policy across cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub cells: usize,
    pub mean_speedup: f64,
    pub worst_speedup: f64,
    /// `model/task` of the worst cell.
    pub worst_cell: String,
    pub best_speedup: f64,
}

/// Policy whose cells anchor the speedups: `none`, or `static:0` (the same
/// thing) when a sweep has no `none` cells.
pub fn baseline_policy(cells: &[CellResult]) -> Option<&'static str> {
    ["none", "static:0"]
        .into_iter()
        .find(|b| cells.iter().any(|c| c.policy == *b))
}

/// Fills each cell's speedup against the no-speculation cell of the same
/// model, task and seed, and summarizes per policy in first-seen order.
pub fn compare_policies(cells: &mut [CellResult]) -> Result<Vec<PolicySummary>> {
    let base_policy = baseline_policy(cells).unwrap_or("none");
    let baselines: Vec<(String, String, u64, f64)> = cells
        .iter()
        .filter(|c| c.policy == base_policy && c.error.is_none())
        .map(|c| (c.model.clone(), c.task.clone(), c.seed, c.agg.tpot))
        .collect();
    for c in cells.iter_mut() {
        if c.error.is_some() {
            continue;
        }
        let base = baselines
            .iter()
            .find(|(m, t, s, _)| *m == c.model && *t == c.task && *s == c.seed)
            .ok_or_else(|| Error::MissingNoneBaseline(format!("{}/{} seed {}", c.model, c.task, c.seed)))?;
        c.speedup = Some(if c.policy == base_policy {
            1.0
        } else {
            base.3 / c.agg.tpot
        });
    }
    let mut out: Vec<PolicySummary> = Vec::new();
    for c in cells.iter() {
        let Some(s) = c.speedup else { continue };
        let where_ = format!("{}/{}", c.model, c.task);
        match out.iter_mut().find(|p| p.policy == c.policy) {
            Some(p) => {
                p.mean_speedup += s;
                p.cells += 1;
                if s < p.worst_speedup {
                    p.worst_speedup = s;
                    p.worst_cell = where_;
                }
                p.best_speedup = p.best_speedup.max(s);
            }
            None => out.push(PolicySummary {
                policy: c.policy.clone(),
                cells: 1,
                mean_speedup: s,
                worst_speedup: s,
                worst_cell: where_,
                best_speedup: s,
            }),
        }
    }
    for p in &mut out {
        p.mean_speedup /= p.cells as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(points: &[(f64, f64)]) -> Option<Regression> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(Regression {
        n,
        slope,
        intercept,
        r2,
    })
}

/// Regression of speedup on utility over all cells that have a speedup.
pub fn utility_speedup_regression(cells: &[CellResult]) -> Option<Regression> {
    let pts: Vec<(f64, f64)> = cells
        .iter()
        .filter_map(|c| c.speedup.map(|s| (c.agg.utility, s)))
        .collect();
    ols(&pts)
}

/// Provenance of a report. `generated_at` is the only field that varies
/// between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generated_at: String,
    pub tool_version: String,
    pub scenario: String,
    pub seeds: Vec<u64>,
    /// `config`, `flag` or `entropy`.
    pub seed_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub metadata: ReportMetadata,
    pub cells: Vec<CellResult>,
    pub policies: Vec<PolicySummary>,
    pub regression: Option<Regression>,
}

impl ScenarioReport {
    /// Builds the report from finished cells: speedups against `none` when
    /// the scenario has it, and the utility/speedup regression.
    pub fn from_cells(metadata: ReportMetadata, mut cells: Vec<CellResult>) -> Result<Self> {
        let policies = if baseline_policy(&cells).is_some() {
            compare_policies(&mut cells)?
        } else {
            Vec::new()
        };
        let regression = utility_speedup_regression(&cells);
        Ok(Self {
            metadata,
            cells,
            policies,
            regression,
        })
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

/// Runs every cell of a scenario. Telemetry, when enabled, is returned per
/// cell alongside the report.
pub fn run_scenario(
    cfg: &crate::scenario::ScenarioConfig,
    seeds: &[u64],
    mut metadata: ReportMetadata,
    telemetry: bool,
) -> Result<(ScenarioReport, Vec<Vec<TelemetryEvent>>)> {
    let specs = cfg.cells(seeds)?;
    let opts = SimOptions { telemetry, ..cfg.sim };
    let runs = run_cells(&specs, &opts);
    let mut cells = Vec::with_capacity(runs.len());
    let mut tele = Vec::new();
    for run in runs {
        cells.push(run.result);
        if telemetry {
            tele.push(run.requests.into_iter().flat_map(|r| r.telemetry).collect());
        }
    }
    metadata.seeds = seeds.to_vec();
    if metadata.scenario.is_empty() {
        metadata.scenario = cfg.name.clone();
    }
    Ok((ScenarioReport::from_cells(metadata, cells)?, tele))
}
