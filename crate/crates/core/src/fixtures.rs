//! Built-in task fixtures.
//!
//! Three single tasks (`code`, `math`, `extract`) and their request mixes
//! (`code+math`, `math+extract`, `code+extract`, `all3`). A mix draws each
//! request from one of its tasks with equal shares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::WorkloadProfile;

const CODE: &str = include_str!("../fixtures/tasks/code.toml");
const MATH: &str = include_str!("../fixtures/tasks/math.toml");
const EXTRACT: &str = include_str!("../fixtures/tasks/extract.toml");

pub const SINGLE_TASKS: [&str; 3] = ["code", "math", "extract"];

/// The seven fixtures in report order.
pub const ALL_FIXTURES: [&str; 7] = [
    "code",
    "math",
    "extract",
    "code+math",
    "math+extract",
    "code+extract",
    "all3",
];

/// A named request mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub mix: Vec<(WorkloadProfile, f64)>,
}

impl Task {
    pub fn single(profile: WorkloadProfile) -> Self {
        Self {
            name: profile.name.clone(),
            mix: vec![(profile, 1.0)],
        }
    }

    /// Equal-share mix of the given profiles.
    pub fn uniform_mix(name: impl Into<String>, profiles: Vec<WorkloadProfile>) -> Self {
        let share = 1.0 / profiles.len() as f64;
        Self {
            name: name.into(),
            mix: profiles.into_iter().map(|p| (p, share)).collect(),
        }
    }

    /// Share-weighted per-token acceptance probability, each profile's phases
    /// weighted by mean duration.
    pub fn mean_accept_prob(&self) -> f64 {
        self.mix
            .iter()
            .map(|(p, share)| {
                let total: f64 = p.phases.iter().map(|ph| ph.mean_duration).sum();
                share
                    * p.phases
                        .iter()
                        .map(|ph| ph.per_token_accept_prob * ph.mean_duration)
                        .sum::<f64>()
                    / total
            })
            .sum()
    }
}

pub fn profile(name: &str) -> Result<WorkloadProfile> {
    let text = match name {
        "code" => CODE,
        "math" => MATH,
        "extract" => EXTRACT,
        _ => {
            return Err(Error::UnknownName {
                kind: "task",
                name: name.to_string(),
            })
        }
    };
    let p: WorkloadProfile = toml::from_str(text).map_err(|e| Error::Parse {
        path: format!("<fixture {name}>").into(),
        msg: e.to_string(),
    })?;
    p.validate()?;
    Ok(p)
}

/// Looks up a fixture by name. Besides the names in [`ALL_FIXTURES`], any
/// `+`-joined list of single tasks is accepted.
pub fn task(name: &str) -> Result<Task> {
    if name == "all3" {
        let profiles = SINGLE_TASKS.iter().map(|n| profile(n)).collect::<Result<Vec<_>>>()?;
        return Ok(Task::uniform_mix(name, profiles));
    }
    if name.contains('+') {
        let profiles = name.split('+').map(|n| profile(n.trim())).collect::<Result<Vec<_>>>()?;
        return Ok(Task::uniform_mix(name, profiles));
    }
    Ok(Task::single(profile(name)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_load() {
        for name in ALL_FIXTURES {
            let t = task(name).unwrap();
            assert_eq!(t.name, name);
            let total: f64 = t.mix.iter().map(|(_, s)| s).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(task("all3").unwrap().mix.len(), 3);
    }

    #[test]
    fn unknown_task() {
        assert!(matches!(task("poetry"), Err(Error::UnknownName { kind: "task", .. })));
        assert!(task("code+poetry").is_err());
    }

    #[test]
    fn math_is_the_hard_one() {
        let m = task("math").unwrap().mean_accept_prob();
        let c = task("code").unwrap().mean_accept_prob();
        assert!(m < c);
    }
}
