//! Scenario files.
//!
//! A scenario is a TOML document listing models, tasks, policies and seeds;
//! every combination becomes one cell.
//!
//! ```toml
//! name = "mixtral_all3"
//! seeds = [1]
//! models = ["mixtral"]           # preset names or inline tables
//! tasks = ["code", "all3"]       # fixture names or inline profiles
//! policies = ["none", "static:1..3", "adaptive"]
//! drafter = "ngram"              # preset name or inline table
//! budget = { tokens = 20000 }    # or { requests = 50 }
//!
//! [sim]
//! timing_jitter = 0.0
//!
//! [controller]
//! k_max = 3
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::cost_model::{CostBreakdown, CostModel, DraftCostModel, ExpertConfig, FixedCostModel, MoeCostModel};
use crate::engine::{CellSpec, Policy, SimOptions};
use crate::error::{Error, Result};
use crate::fixtures::{self, Task};
use crate::workload::{StreamBudget, WorkloadProfile};

/// Largest static `k` a scenario may ask for unless it sets `k_max`.
pub const DEFAULT_STATIC_K_MAX: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Moe(ExpertConfig),
    Fixed(NamedFixedModel),
}

/// A [`FixedCostModel`] with a report name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFixedModel {
    pub name: String,
    #[serde(flatten)]
    pub model: FixedCostModel,
}

impl CostModel for NamedFixedModel {
    fn iteration_cost(&self, k: usize, task_affinity: f64, rng: &mut dyn rand::RngCore) -> CostBreakdown {
        self.model.iteration_cost(k, task_affinity, rng)
    }

    fn baseline_iter_time(&self) -> f64 {
        self.model.baseline_iter_time
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Fixture(String),
    Inline(WorkloadProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DrafterRef {
    Preset(String),
    Inline(DraftCostModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Requests(u64),
    Tokens(u64),
}

impl From<BudgetSpec> for StreamBudget {
    fn from(b: BudgetSpec) -> Self {
        match b {
            BudgetSpec::Requests(n) => StreamBudget::Requests(n),
            BudgetSpec::Tokens(n) => StreamBudget::Tokens(n),
        }
    }
}

fn default_policies() -> Vec<String> {
    vec!["none".into(), "static:1..3".into(), "adaptive".into()]
}

fn default_drafter() -> DrafterRef {
    DrafterRef::Preset("ngram".into())
}

fn default_budget() -> BudgetSpec {
    BudgetSpec::Tokens(20_000)
}

fn default_k_max() -> usize {
    DEFAULT_STATIC_K_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// Missing seeds are drawn from entropy by the caller and recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub models: Vec<ModelRef>,
    pub tasks: Vec<TaskRef>,
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    #[serde(default = "default_drafter")]
    pub drafter: DrafterRef,
    #[serde(default = "default_budget")]
    pub budget: BudgetSpec,
    /// Upper bound for static policies.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub sim: SimOptions,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn drafter(&self) -> Result<DraftCostModel> {
        let d = match &self.drafter {
            DrafterRef::Preset(name) => DraftCostModel::preset(name)?,
            DrafterRef::Inline(d) => d.clone(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn models(&self) -> Result<Vec<Arc<dyn CostModel>>> {
        let draft = self.drafter()?;
        self.models
            .iter()
            .map(|m| -> Result<Arc<dyn CostModel>> {
                Ok(match m {
                    ModelRef::Preset(name) => Arc::new(MoeCostModel::new(ExpertConfig::preset(name)?, draft.clone())?),
                    ModelRef::Moe(cfg) => Arc::new(MoeCostModel::new(cfg.clone(), draft.clone())?),
                    ModelRef::Fixed(f) => Arc::new(f.clone()),
                })
            })
            .collect()
    }

    pub fn tasks(&self) -> Result<Vec<Task>> {
        self.tasks
            .iter()
            .map(|t| match t {
                TaskRef::Fixture(name) => fixtures::task(name),
                TaskRef::Inline(p) => {
                    p.validate()?;
                    Ok(Task::single(p.clone()))
                }
            })
            .collect()
    }

    pub fn parsed_policies(&self) -> Result<Vec<Policy>> {
        let joined = self.policies.join(",");
        let policies = Policy::parse_list(&joined, &self.controller)?;
        for p in &policies {
            p.validate(self.k_max)?;
        }
        Ok(policies)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("scenario lists no models"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("scenario lists no tasks"));
        }
        if matches!(self.seeds.as_deref(), Some([])) {
            return Err(Error::config("`seeds` is empty"));
        }
        self.sim.validate()?;
        self.controller.validate()?;
        self.models()?;
        self.tasks()?;
        self.parsed_policies()?;
        Ok(())
    }

    /// Every model x task x policy x seed combination, in that nesting order.
    pub fn cells(&self, seeds: &[u64]) -> Result<Vec<CellSpec>> {
        self.validate()?;
        let models = self.models()?;
        let tasks = self.tasks()?;
        let policies = self.parsed_policies()?;
        let mut out = Vec::with_capacity(models.len() * tasks.len() * policies.len() * seeds.len());
        for model in &models {
            for task in &tasks {
                for policy in &policies {
                    for &seed in seeds {
                        out.push(CellSpec {
                            model: Arc::clone(model),
                            task: task.clone(),
                            policy: policy.clone(),
                            seed,
                            budget: self.budget.into(),
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}
