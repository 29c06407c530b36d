//! Shared inputs for the benchmarks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specmoe_core::workload::RequestSpec;
use specmoe_core::{DraftCostModel, ExpertConfig, MoeCostModel, WorkloadProfile};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn model(preset: &str) -> MoeCostModel {
    MoeCostModel::new(
        ExpertConfig::preset(preset).expect("known preset"),
        DraftCostModel::ngram(),
    )
    .expect("valid preset")
}

/// A single-phase request of `len` tokens.
pub fn request(p: f64, len: u32) -> RequestSpec {
    RequestSpec {
        index: 0,
        profile: Arc::new(WorkloadProfile::constant("bench", p, len)),
        output_len: len,
        seed: 17,
    }
}
