//! Per-iteration execution time of a speculative decode step.
//!
//! A decode step with speculation length `k` pushes `k + 1` tokens through the
//! target model. Attention cost is flat in `k`; expert cost scales with the
//! number of distinct experts the in-flight tokens route to, because a
//! single-batch MoE decode step is bound by fetching expert weights. Drafting
//! and rejection sampling add small fractional overheads on top.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on routed experts per layer supported by the sampler.
pub const MAX_ROUTED_EXPERTS: u32 = 256;

/// Routing geometry and timing of an MoE target model.
///
/// `experts_per_layer` counts every expert in a layer, shared ones included,
/// so the routed pool is `experts_per_layer - shared_experts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    #[serde(default)]
    pub name: String,
    pub num_layers: u32,
    pub experts_per_layer: u32,
    pub top_k: u32,
    #[serde(default)]
    pub shared_experts: u32,
    /// Probability that a token reuses the previous token's routed set, per layer.
    #[serde(default)]
    pub affinity: f64,
    #[serde(default = "default_baseline_iter_time")]
    pub baseline_iter_time: f64,
    #[serde(default = "default_attention_fraction")]
    pub attention_fraction: f64,
}

fn default_baseline_iter_time() -> f64 {
    1.0
}

fn default_attention_fraction() -> f64 {
    0.08
}

impl ExpertConfig {
    /// Names accepted by [`ExpertConfig::preset`].
    pub const PRESETS: [&'static str; 6] = ["mixtral", "phi3.5", "olmoe", "deepseek", "qwen1.5", "dense"];

    /// Built-in model geometries.
    ///
    /// Expert counts come from the public model cards. Affinity values are
    /// calibration knobs (Mixtral routes with little reuse, OLMoE with a lot);
    /// iteration times are in milliseconds for Mixtral and OLMoE and
    /// normalized to 1.0 elsewhere.
    pub fn preset(name: &str) -> Result<Self> {
        let (canonical, layers, total, top_k, shared, affinity, base) = match name.to_ascii_lowercase().as_str() {
            "mixtral" => ("mixtral", 32, 8, 2, 0, 0.0, 28.0),
            "phi" | "phi3.5" | "phi-3.5" => ("phi3.5", 32, 16, 2, 0, 0.1, 1.0),
            "olmoe" => ("olmoe", 16, 64, 8, 0, 0.5, 6.0),
            "deepseek" | "deepseekv1" | "deepseek-v1" => ("deepseek", 28, 66, 6, 2, 0.2, 1.0),
            "qwen" | "qwen1.5" | "qwen-1.5" => ("qwen1.5", 24, 64, 4, 4, 0.2, 1.0),
            "dense" => ("dense", 32, 1, 1, 0, 0.0, 1.0),
            _ => {
                return Err(Error::UnknownName {
                    kind: "model preset",
                    name: name.to_string(),
                })
            }
        };
        Ok(Self {
            name: canonical.to_string(),
            num_layers: layers,
            experts_per_layer: total,
            top_k,
            shared_experts: shared,
            affinity,
            baseline_iter_time: base,
            attention_fraction: 0.08,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config(format!("{}: num_layers must be >= 1", self.name)));
        }
        let active = self.top_k + self.shared_experts;
        if active == 0 || active > self.experts_per_layer {
            return Err(Error::config(format!(
                "{}: need 1 <= top_k + shared_experts <= experts_per_layer (got {} + {} vs {})",
                self.name, self.top_k, self.shared_experts, self.experts_per_layer
            )));
        }
        if self.routed_experts() > MAX_ROUTED_EXPERTS {
            return Err(Error::config(format!(
                "{}: at most {MAX_ROUTED_EXPERTS} routed experts per layer are supported",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return Err(Error::config(format!("{}: affinity must be in [0, 1]", self.name)));
        }
        if !(self.attention_fraction > 0.0 && self.attention_fraction < 1.0) {
            return Err(Error::config(format!(
                "{}: attention_fraction must be in (0, 1)",
                self.name
            )));
        }
        if !(self.baseline_iter_time > 0.0 && self.baseline_iter_time.is_finite()) {
            return Err(Error::config(format!("{}: baseline_iter_time must be > 0", self.name)));
        }
        Ok(())
    }

    pub fn routed_experts(&self) -> u32 {
        self.experts_per_layer - self.shared_experts
    }

    /// Experts fetched per layer by a single token.
    pub fn experts_per_token(&self) -> u32 {
        self.top_k + self.shared_experts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrafterKind {
    /// Stateless drafter (n-gram matching); nothing to run when speculation is off.
    Free,
    /// Model-based drafter whose KV state must be kept current even at `k = 0`.
    PerTokenLinear,
}

/// Drafting and rejection-sampling overheads, as fractions of the baseline
/// iteration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftCostModel {
    pub kind: DrafterKind,
    #[serde(default)]
    pub per_k_overhead: f64,
    #[serde(default)]
    pub sampling_overhead: f64,
    #[serde(default)]
    pub always_on_overhead: f64,
}

impl DraftCostModel {
    pub const PRESETS: [&'static str; 3] = ["free", "ngram", "eagle"];

    /// No drafting or sampling cost at all.
    pub fn free() -> Self {
        Self {
            kind: DrafterKind::Free,
            per_k_overhead: 0.0,
            sampling_overhead: 0.0,
            always_on_overhead: 0.0,
        }
    }

    /// n-gram matching: drafting plus sampling stay within 1-2% of baseline.
    pub fn ngram() -> Self {
        Self {
            kind: DrafterKind::Free,
            per_k_overhead: 0.002,
            sampling_overhead: 0.01,
            always_on_overhead: 0.0,
        }
    }

    /// EAGLE-style learned drafter: ~5% per unit of `k`, plus the cost of
    /// keeping its KV state warm while speculation is disabled.
    pub fn eagle() -> Self {
        Self {
            kind: DrafterKind::PerTokenLinear,
            per_k_overhead: 0.05,
            sampling_overhead: 0.01,
            always_on_overhead: 0.025,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "free" => Ok(Self::free()),
            "ngram" | "n-gram" => Ok(Self::ngram()),
            "eagle" => Ok(Self::eagle()),
            _ => Err(Error::UnknownName {
                kind: "drafter preset",
                name: name.to_string(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.per_k_overhead, self.sampling_overhead, self.always_on_overhead];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("drafter overheads must be finite and >= 0"));
        }
        Ok(())
    }

    /// Drafting time as a fraction of the baseline iteration.
    pub fn draft_fraction(&self, k: usize) -> f64 {
        if k == 0 {
            match self.kind {
                DrafterKind::Free => 0.0,
                DrafterKind::PerTokenLinear => self.always_on_overhead,
            }
        } else {
            self.per_k_overhead * k as f64
        }
    }

    pub fn sampling_fraction(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.sampling_overhead
        }
    }
}

/// Time spent in one decode iteration, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub attention_time: f64,
    pub expert_time: f64,
    pub draft_time: f64,
    pub sampling_time: f64,
    /// Mean distinct experts fetched per layer, shared experts included.
    /// Zero for cost models that do not track routing.
    pub active_experts_per_layer: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(attention: f64, expert: f64, draft: f64, sampling: f64, active: f64) -> Self {
        Self {
            attention_time: attention,
            expert_time: expert,
            draft_time: draft,
            sampling_time: sampling,
            active_experts_per_layer: active,
            total: attention + expert + draft + sampling,
        }
    }

    /// Verification time: everything the target model spends on the step.
    pub fn verify_time(&self) -> f64 {
        self.attention_time + self.expert_time
    }

    /// Multiplies every component by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.attention_time * factor,
            self.expert_time * factor,
            self.draft_time * factor,
            self.sampling_time * factor,
            self.active_experts_per_layer,
        )
    }
}

/// Expected distinct experts hit when `tokens` tokens each pick `k` of `e`
/// experts uniformly at random: `E * (1 - (1 - k/E)^tokens)`.
pub fn expected_unique_experts(e: u32, k: u32, tokens: u32) -> Result<f64> {
    if k == 0 || k > e {
        return Err(Error::invalid(format!("need 1 <= k <= E (k = {k}, E = {e})")));
    }
    if tokens == 0 {
        return Err(Error::invalid("tokens must be >= 1"));
    }
    let e = f64::from(e);
    let miss = 1.0 - f64::from(k) / e;
    Ok(e * (1.0 - miss.powi(tokens as i32)))
}

#[derive(Clone, Copy, Default, PartialEq, Eq)]
struct ExpertSet([u64; 4]);

impl ExpertSet {
    fn contains(&self, i: u32) -> bool {
        self.0[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    fn insert(&mut self, i: u32) {
        self.0[(i / 64) as usize] |= 1 << (i % 64);
    }

    fn union_with(&mut self, other: &ExpertSet) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a |= *b;
        }
    }

    fn len(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    /// Uniform `k`-subset of `0..n` (Floyd's algorithm).
    fn sample<R: Rng + ?Sized>(n: u32, k: u32, rng: &mut R) -> Self {
        let mut set = ExpertSet::default();
        for j in (n - k)..n {
            let t = rng.random_range(0..=j);
            if set.contains(t) {
                set.insert(j);
            } else {
                set.insert(t);
            }
        }
        set
    }
}

/// Distinct routed experts touched in one layer by `tokens` consecutive
/// tokens. Each token after the first copies its predecessor's set with
/// probability `affinity`, otherwise draws `top_k` fresh experts.
fn sample_routed_layer<R: Rng + ?Sized>(routed: u32, top_k: u32, affinity: f64, tokens: usize, rng: &mut R) -> u32 {
    if top_k == 0 {
        return 0;
    }
    let mut current = ExpertSet::sample(routed, top_k, rng);
    let mut union = current;
    for _ in 1..tokens {
        let reuse = affinity >= 1.0 || (affinity > 0.0 && rng.random::<f64>() < affinity);
        if !reuse {
            current = ExpertSet::sample(routed, top_k, rng);
            union.union_with(&current);
        }
    }
    union.len()
}

/// One draw of the experts fetched by a single layer for `tokens` in-flight
/// tokens, using the config's own affinity. Shared experts are counted once.
pub fn sample_active_experts<R: Rng + ?Sized>(cfg: &ExpertConfig, tokens: usize, rng: &mut R) -> f64 {
    sample_active_experts_with_affinity(cfg, tokens, cfg.affinity, rng)
}

pub fn sample_active_experts_with_affinity<R: Rng + ?Sized>(
    cfg: &ExpertConfig,
    tokens: usize,
    affinity: f64,
    rng: &mut R,
) -> f64 {
    let tokens = tokens.max(1);
    let routed = sample_routed_layer(cfg.routed_experts(), cfg.top_k, affinity, tokens, rng);
    f64::from(routed + cfg.shared_experts)
}

/// Cost of one iteration at speculation length `k` under the config's affinity.
pub fn iteration_cost<R: Rng + ?Sized>(
    cfg: &ExpertConfig,
    draft: &DraftCostModel,
    k: usize,
    rng: &mut R,
) -> CostBreakdown {
    iteration_cost_with_affinity(cfg, draft, k, cfg.affinity, rng)
}

pub fn iteration_cost_with_affinity<R: Rng + ?Sized>(
    cfg: &ExpertConfig,
    draft: &DraftCostModel,
    k: usize,
    affinity: f64,
    rng: &mut R,
) -> CostBreakdown {
    let base = cfg.baseline_iter_time;
    let attention = cfg.attention_fraction * base;
    let per_token = f64::from(cfg.experts_per_token());

    let active = if k == 0 {
        // A lone token always fetches exactly top_k + shared experts.
        per_token
    } else {
        let layers = cfg.num_layers.max(1);
        let sum: f64 = (0..layers)
            .map(|_| sample_active_experts_with_affinity(cfg, k + 1, affinity, rng))
            .sum();
        sum / f64::from(layers)
    };
    let ratio = active / per_token;
    let expert = if ratio == 1.0 {
        base - attention
    } else {
        (base - attention) * ratio
    };

    CostBreakdown::new(
        attention,
        expert,
        draft.draft_fraction(k) * base,
        draft.sampling_fraction(k) * base,
        active,
    )
}

/// Source of per-iteration costs for the simulation engine.
pub trait CostModel: Send + Sync {
    /// Cost of one iteration with `k` draft tokens. `task_affinity` is the
    /// workload's own routing reuse tendency, combined with the model's.
    fn iteration_cost(&self, k: usize, task_affinity: f64, rng: &mut dyn RngCore) -> CostBreakdown;

    /// Nominal no-speculation iteration time.
    fn baseline_iter_time(&self) -> f64;

    fn name(&self) -> &str;
}

/// Routing-driven cost model for an MoE target and a drafter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeCostModel {
    pub expert: ExpertConfig,
    pub draft: DraftCostModel,
}

impl MoeCostModel {
    pub fn new(expert: ExpertConfig, draft: DraftCostModel) -> Result<Self> {
        expert.validate()?;
        draft.validate()?;
        Ok(Self { expert, draft })
    }

    /// Reuse probability when both the model and the task favour reuse: a
    /// token reuses its predecessor's set if either tendency fires.
    pub fn combined_affinity(&self, task_affinity: f64) -> f64 {
        let task = task_affinity.clamp(0.0, 1.0);
        1.0 - (1.0 - self.expert.affinity) * (1.0 - task)
    }
}

impl CostModel for MoeCostModel {
    fn iteration_cost(&self, k: usize, task_affinity: f64, rng: &mut dyn RngCore) -> CostBreakdown {
        let affinity = self.combined_affinity(task_affinity);
        iteration_cost_with_affinity(&self.expert, &self.draft, k, affinity, rng)
    }

    fn baseline_iter_time(&self) -> f64 {
        self.expert.baseline_iter_time
    }

    fn name(&self) -> &str {
        &self.expert.name
    }
}

/// Deterministic cost model: iteration time is a fixed multiple of the
/// baseline for each `k`. Used for worked examples and controller tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedCostModel {
    pub baseline_iter_time: f64,
    /// `ratios[k]` is the cost multiplier at speculation length `k >= 1`;
    /// index 0 is ignored (no speculation costs exactly the baseline). The
    /// last entry is reused for larger `k`.
    pub ratios: Vec<f64>,
}

impl FixedCostModel {
    /// Every speculative iteration costs `ratio` baselines.
    pub fn constant(baseline_iter_time: f64, ratio: f64) -> Self {
        Self {
            baseline_iter_time,
            ratios: vec![1.0, ratio],
        }
    }

    pub fn ratio(&self, k: usize) -> f64 {
        if k == 0 || self.ratios.len() < 2 {
            1.0
        } else {
            self.ratios[k.min(self.ratios.len() - 1)]
        }
    }
}

impl CostModel for FixedCostModel {
    fn iteration_cost(&self, k: usize, _task_affinity: f64, _rng: &mut dyn RngCore) -> CostBreakdown {
        CostBreakdown::new(0.0, self.baseline_iter_time * self.ratio(k), 0.0, 0.0, 0.0)
    }

    fn baseline_iter_time(&self) -> f64 {
        self.baseline_iter_time
    }

    fn name(&self) -> &str {
        "fixed"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn unique_experts_single_token_is_top_k() {
        assert_eq!(expected_unique_experts(8, 2, 1).unwrap(), 2.0);
        assert_eq!(expected_unique_experts(64, 8, 1).unwrap(), 8.0);
    }

    #[test]
    fn unique_experts_mixtral_k7() {
        // 8 * (1 - 0.75^8)
        let v = expected_unique_experts(8, 2, 8).unwrap();
        assert_relative_eq!(v, 7.199_096_679_687_5, max_relative = 1e-12);
        assert!(v > 7.0);
    }

    #[test]
    fn unique_experts_rejects_bad_arguments() {
        assert!(expected_unique_experts(8, 9, 3).is_err());
        assert!(expected_unique_experts(8, 0, 3).is_err());
        assert!(expected_unique_experts(8, 2, 0).is_err());
    }

    #[test]
    fn full_affinity_reuses_one_set() {
        let mut cfg = ExpertConfig::preset("mixtral").unwrap();
        cfg.affinity = 1.0;
        let mut rng = rng();
        for _ in 0..1000 {
            assert_eq!(sample_active_experts(&cfg, 8, &mut rng), 2.0);
        }
    }

    #[test]
    fn shared_experts_always_counted_once() {
        let cfg = ExpertConfig::preset("deepseek").unwrap();
        let mut rng = rng();
        for _ in 0..1000 {
            let v = sample_active_experts(&cfg, 1, &mut rng);
            assert_eq!(v, 8.0);
        }
    }

    #[test]
    fn zero_k_free_drafting_costs_exactly_baseline() {
        let mut rng = rng();
        for name in ExpertConfig::PRESETS {
            let cfg = ExpertConfig::preset(name).unwrap();
            let c = iteration_cost(&cfg, &DraftCostModel::free(), 0, &mut rng);
            assert_eq!(c.total, cfg.baseline_iter_time, "{name}");
            let c = iteration_cost(&cfg, &DraftCostModel::ngram(), 0, &mut rng);
            assert_eq!(c.total, cfg.baseline_iter_time, "{name}");
        }
    }

    #[test]
    fn model_drafter_pays_always_on_cost_at_zero_k() {
        let cfg = ExpertConfig::preset("mixtral").unwrap();
        let c = iteration_cost(&cfg, &DraftCostModel::eagle(), 0, &mut rng());
        assert_relative_eq!(c.total, 28.0 * 1.025, max_relative = 1e-12);
        assert_eq!(c.sampling_time, 0.0);
    }

    #[test]
    fn dense_expert_time_flat_in_k() {
        let cfg = ExpertConfig::preset("dense").unwrap();
        let draft = DraftCostModel::ngram();
        let mut rng = rng();
        let base = iteration_cost(&cfg, &draft, 0, &mut rng);
        for k in 1..=7 {
            let c = iteration_cost(&cfg, &draft, k, &mut rng);
            assert_eq!(c.expert_time, base.expert_time);
            assert_eq!(c.attention_time, base.attention_time);
            let ratio = c.total / base.total;
            assert!(ratio >= 1.0);
            assert!(ratio <= 1.0 + draft.per_k_overhead * k as f64 + draft.sampling_overhead + 1e-12);
            // verification overhead on a dense model stays within 3%
            assert!(c.verify_time() / base.verify_time() <= 1.03);
        }
    }

    #[test]
    fn breakdown_total_is_component_sum() {
        let cfg = ExpertConfig::preset("qwen1.5").unwrap();
        let mut rng = rng();
        for k in 0..8 {
            let c = iteration_cost(&cfg, &DraftCostModel::eagle(), k, &mut rng);
            assert_relative_eq!(
                c.total,
                c.attention_time + c.expert_time + c.draft_time + c.sampling_time,
                max_relative = 1e-15
            );
            let lo = f64::from(cfg.experts_per_token());
            let hi = f64::from(
                cfg.experts_per_layer
                    .min(cfg.shared_experts + cfg.top_k * (k as u32 + 1)),
            );
            assert!(c.active_experts_per_layer >= lo && c.active_experts_per_layer <= hi);
        }
    }

    #[test]
    fn preset_validation() {
        for name in ExpertConfig::PRESETS {
            ExpertConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ExpertConfig::preset("gpt5").is_err());
        let mut bad = ExpertConfig::preset("mixtral").unwrap();
        bad.top_k = 9;
        assert!(bad.validate().is_err());
        let mut bad = ExpertConfig::preset("mixtral").unwrap();
        bad.attention_fraction = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_cost_model_ratios() {
        let m = FixedCostModel::constant(1.0, 2.0);
        let mut r = rng();
        assert_eq!(m.iteration_cost(0, 0.0, &mut r).total, 1.0);
        assert_eq!(m.iteration_cost(1, 0.0, &mut r).total, 2.0);
        assert_eq!(m.iteration_cost(7, 0.0, &mut r).total, 2.0);
    }

    #[test]
    fn combined_affinity_composes() {
        let mut m = MoeCostModel::new(ExpertConfig::preset("mixtral").unwrap(), DraftCostModel::ngram()).unwrap();
        assert_relative_eq!(m.combined_affinity(0.3), 0.3);
        m.expert.affinity = 0.5;
        assert_relative_eq!(m.combined_affinity(0.5), 0.75);
    }
}
