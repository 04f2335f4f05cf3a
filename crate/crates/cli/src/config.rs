//! Experiment configuration: a versioned TOML document.
//!
//! ```toml
//! config_version = 1
//! policies = ["round_robin", "least_connections", "weighted", "rl"]
//! seeds = [1, 2, 3]
//! training_tasks = 200000
//! training_episode_tasks = 10000   # optional
//! rl_evaluation = "online"          # optional: "online" (default) | "greedy"
//! evaluation_horizon = 5000.0
//! out_dir = "out"
//!
//! [[cluster]]
//! speed = 2.0
//! slots = 1        # optional, default 1
//! weight = 2.0     # optional, default = speed
//!
//! [workload.traffic]
//! type = "steady"
//! rate = 1.5
//!
//! [workload.size_dist]
//! type = "exponential"
//! mean = 1.0
//!
//! [agent]          # every key optional
//! alpha = 0.1
//!
//! [sweep]
//! load_multipliers = [0.5, 0.8, 1.1]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use rl_balance::rl::{AgentConfig, RewardConfig};
use rl_balance::{PolicyKind, ServerSpec, SizeDist, TrafficKind, WorkloadSpec};

use crate::UsageError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    config_version: u32,
    cluster: Vec<RawServer>,
    workload: RawWorkload,
    policies: Vec<String>,
    #[serde(default)]
    agent: RawAgent,
    training_tasks: u64,
    training_episode_tasks: Option<u64>,
    #[serde(default)]
    rl_evaluation: RlEvaluation,
    evaluation_horizon: f64,
    seeds: Vec<u64>,
    out_dir: PathBuf,
    sample_interval: Option<f64>,
    sweep: Option<RawSweep>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServer {
    speed: f64,
    #[serde(default = "one")]
    slots: usize,
    weight: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    traffic: TrafficKind,
    size_dist: SizeDist,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    alpha: Option<f64>,
    gamma: Option<f64>,
    epsilon_start: Option<f64>,
    epsilon_end: Option<f64>,
    epsilon_decay_tasks: Option<u64>,
    util_bins: Option<u8>,
    active_bins: Option<u8>,
    t_ref: Option<f64>,
    kappa: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    load_multipliers: Vec<f64>,
}

/// How the trained agent behaves during evaluation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlEvaluation {
    /// Keeps learning from the trained table at `epsilon_end`.
    #[default]
    Online,
    /// Frozen table, pure exploitation.
    Greedy,
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cluster: Vec<ServerSpec>,
    /// Horizon equals `evaluation_horizon`.
    pub workload: WorkloadSpec,
    pub policies: Vec<PolicyKind>,
    pub agent: AgentConfig,
    pub training_tasks: u64,
    /// Training restarts from an empty cluster every this many arrivals;
    /// `None` trains on one continuous run.
    pub training_episode_tasks: Option<u64>,
    pub rl_evaluation: RlEvaluation,
    pub evaluation_horizon: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub sample_interval: Option<f64>,
    /// Sweep points, as fractions of aggregate service capacity.
    pub load_multipliers: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        raw.validate()
    }

    /// Sum of `speed * slots`: work units served per second at saturation.
    pub fn capacity(&self) -> f64 {
        self.cluster.iter().map(|s| s.speed * s.slots as f64).sum()
    }

    /// Offered load as a fraction of capacity.
    pub fn load_factor(&self) -> f64 {
        self.workload.mean_rate() * self.workload.size_dist.mean() / self.capacity()
    }

    /// The workload rescaled so its offered load is `multiplier` times capacity.
    pub fn workload_at(&self, multiplier: f64) -> WorkloadSpec {
        self.workload.scaled(multiplier / self.load_factor())
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl RawConfig {
    fn validate(self) -> Result<ExperimentConfig, UsageError> {
        let mut bad: Vec<String> = Vec::new();
        if self.config_version != CONFIG_VERSION {
            bad.push(format!(
                "config_version: unsupported version {} (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }

        if self.cluster.is_empty() {
            bad.push("cluster: at least one server required".into());
        }
        let mut cluster = Vec::with_capacity(self.cluster.len());
        for (i, s) in self.cluster.iter().enumerate() {
            if !positive(s.speed) {
                bad.push(format!("cluster[{i}].speed: must be > 0"));
            }
            if s.slots == 0 {
                bad.push(format!("cluster[{i}].slots: must be >= 1"));
            }
            if let Some(w) = s.weight {
                if !positive(w) {
                    bad.push(format!("cluster[{i}].weight: must be > 0"));
                }
            }
            let spec = ServerSpec::new(i, s.speed, s.slots);
            cluster.push(match s.weight {
                Some(w) => spec.with_weight(w),
                None => spec,
            });
        }

        if !positive(self.evaluation_horizon) {
            bad.push("evaluation_horizon: must be > 0".into());
        }
        let workload = WorkloadSpec {
            kind: self.workload.traffic,
            size_dist: self.workload.size_dist,
            horizon: if positive(self.evaluation_horizon) {
                self.evaluation_horizon
            } else {
                1.0
            },
        };
        if let Err(e) = workload.validate() {
            bad.push(e.to_string());
        }

        if self.policies.is_empty() {
            bad.push("policies: at least one policy required".into());
        }
        let mut policies = Vec::with_capacity(self.policies.len());
        for (i, name) in self.policies.iter().enumerate() {
            match name.parse::<PolicyKind>() {
                Ok(p) if policies.contains(&p) => {
                    bad.push(format!("policies[{i}]: `{name}` listed twice"))
                }
                Ok(p) => policies.push(p),
                Err(e) => bad.push(format!("policies[{i}]: {e}")),
            }
        }

        if self.seeds.is_empty() {
            bad.push("seeds: at least one seed required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bad.push("seeds: duplicate seed".into());
        }

        if self.training_episode_tasks == Some(0) {
            bad.push("training_episode_tasks: must be >= 1".into());
        }

        if let Some(dt) = self.sample_interval {
            if !positive(dt) {
                bad.push("sample_interval: must be > 0".into());
            }
        }

        let load_multipliers = self.sweep.map(|s| s.load_multipliers);
        if let Some(ms) = &load_multipliers {
            if ms.is_empty() {
                bad.push("sweep.load_multipliers: at least one multiplier required".into());
            }
            for (i, m) in ms.iter().enumerate() {
                if !positive(*m) {
                    bad.push(format!("sweep.load_multipliers[{i}]: must be > 0, got {m}"));
                }
            }
        }

        let a = self.agent;
        let defaults = AgentConfig::default();
        let mean_size = workload.size_dist.mean();
        let t_ref_default = if cluster.is_empty() || !positive(mean_size) {
            1.0
        } else {
            RewardConfig::for_cluster(&cluster, mean_size).t_ref
        };
        let agent = AgentConfig {
            alpha: a.alpha.unwrap_or(defaults.alpha),
            gamma: a.gamma.unwrap_or(defaults.gamma),
            epsilon_start: a.epsilon_start.unwrap_or(defaults.epsilon_start),
            epsilon_end: a.epsilon_end.unwrap_or(defaults.epsilon_end),
            // Decay over the first half of training unless told otherwise.
            epsilon_decay_tasks: a
                .epsilon_decay_tasks
                .unwrap_or((self.training_tasks / 2).max(1)),
            util_bins: a.util_bins.unwrap_or(defaults.util_bins),
            active_bins: a.active_bins.unwrap_or(defaults.active_bins),
            reward: RewardConfig {
                t_ref: a.t_ref.unwrap_or(t_ref_default),
                kappa: a.kappa.unwrap_or(RewardConfig::DEFAULT_KAPPA),
            },
        };
        if let Err(e) = agent.validate() {
            bad.push(e.to_string());
        }

        if !bad.is_empty() {
            return Err(UsageError(format!(
                "invalid config:\n  {}",
                bad.join("\n  ")
            )));
        }
        Ok(ExperimentConfig {
            cluster,
            workload,
            policies,
            agent,
            training_tasks: self.training_tasks,
            training_episode_tasks: self.training_episode_tasks,
            rl_evaluation: self.rl_evaluation,
            evaluation_horizon: self.evaluation_horizon,
            seeds: self.seeds,
            out_dir: self.out_dir,
            sample_interval: self.sample_interval,
            load_multipliers,
        })
    }
}
