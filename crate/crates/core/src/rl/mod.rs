//! Tabular Q-learning dispatcher.
//!
//! The agent observes a discretized view of the pool (per-server utilization
//! bins, active tasks per server, overall load), picks a server
//! epsilon-greedily and learns with the one-step Q-learning update
//!
//! ```text
//! Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))
//! ```
//!
//! Credit is delayed: `(s, a)` is captured when a task is dispatched, while
//! the reward and `s'` are observed when that task completes, since the
//! response time is unknown until then.

mod agent;
pub mod mdp;
mod qtable;

use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CompletedTaskRecord;
use crate::rng::SimRng;
use crate::sim::{ClusterSnapshot, ServerSpec};

pub use agent::{
    read_learning_curve, train, train_episodes, write_learning_curve, CurvePoint, QAgent,
    TrainOutcome, CURVE_CSV_HEADER, CURVE_WINDOW,
};
pub use qtable::{read_qtable, write_qtable, QEntry, QTable, QTABLE_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiscreteState {
    pub util_bins: Vec<u8>,
    pub active_tasks_bin: u8,
    pub load_bin: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RewardValue(f64);

impl RewardValue {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(RewardValue(value))
        } else {
            Err(Error::NonFiniteReward(value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Response-time scale, seconds.
    pub t_ref: f64,
    /// Weight of the utilization-imbalance penalty.
    pub kappa: f64,
}

impl RewardConfig {
    pub const DEFAULT_KAPPA: f64 = 0.5;

    /// `t_ref` = mean task size / mean server speed.
    pub fn for_cluster(specs: &[ServerSpec], mean_size: f64) -> Self {
        let mean_speed = specs.iter().map(|s| s.speed).sum::<f64>() / specs.len().max(1) as f64;
        RewardConfig {
            t_ref: mean_size / mean_speed,
            kappa: Self::DEFAULT_KAPPA,
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            t_ref: 1.0,
            kappa: Self::DEFAULT_KAPPA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Arrivals over which epsilon decays linearly to `epsilon_end`.
    pub epsilon_decay_tasks: u64,
    pub util_bins: u8,
    pub active_bins: u8,
    pub reward: RewardConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha: 0.1,
            gamma: 0.9,
            epsilon_start: 0.2,
            epsilon_end: 0.01,
            epsilon_decay_tasks: 100_000,
            util_bins: 3,
            active_bins: 4,
            reward: RewardConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            bad.push("alpha must be in (0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            bad.push("gamma must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) {
            bad.push("epsilon_start must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_end) {
            bad.push("epsilon_end must be in [0, 1]");
        }
        if self.epsilon_end > self.epsilon_start {
            bad.push("epsilon_end must not exceed epsilon_start");
        }
        if self.epsilon_decay_tasks == 0 {
            bad.push("epsilon_decay_tasks must be > 0");
        }
        if self.util_bins == 0 {
            bad.push("util_bins must be > 0");
        }
        if self.active_bins == 0 {
            bad.push("active_bins must be > 0");
        }
        if !(self.reward.t_ref.is_finite() && self.reward.t_ref > 0.0) {
            bad.push("reward.t_ref must be > 0");
        }
        if !(self.reward.kappa.is_finite() && self.reward.kappa >= 0.0) {
            bad.push("reward.kappa must be >= 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("agent: {}", bad.join("; "))))
        }
    }

    /// Exploration rate for the `arrivals`-th dispatch (0-based).
    pub fn epsilon_at(&self, arrivals: u64) -> f64 {
        if arrivals >= self.epsilon_decay_tasks {
            return self.epsilon_end;
        }
        let frac = arrivals as f64 / self.epsilon_decay_tasks as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

fn bin(x: f64, bins: u8) -> u8 {
    let b = (x * f64::from(bins)).floor();
    if b <= 0.0 {
        0
    } else {
        (b as u64).min(u64::from(bins) - 1) as u8
    }
}

pub fn discretize(snapshot: &ClusterSnapshot, config: &AgentConfig) -> DiscreteState {
    let n = snapshot.servers().max(1);
    let per_server = (snapshot.active_tasks / n).min(usize::from(config.active_bins) - 1);
    DiscreteState {
        util_bins: snapshot
            .instant_utilization
            .iter()
            .map(|&u| bin(u, config.util_bins))
            .collect(),
        active_tasks_bin: per_server as u8,
        load_bin: bin(snapshot.system_load, config.util_bins),
    }
}

/// Epsilon-greedy choice. Always draws one uniform number for the
/// explore/exploit branch and a second only when exploring.
pub fn select_action<S: Hash + Eq + Clone>(
    q: &QTable<S>,
    state: &S,
    epsilon: f64,
    rng: &mut SimRng,
) -> ActionId {
    let u: f64 = rng.random();
    if u < epsilon {
        ActionId(rng.random_range(0..q.n_actions()))
    } else {
        q.greedy_action(state)
    }
}

/// `-(response_time / t_ref) - kappa * (max_util - min_util)`.
pub fn compute_reward(
    record: &CompletedTaskRecord,
    snapshot: &ClusterSnapshot,
    config: &AgentConfig,
) -> Result<RewardValue> {
    let (lo, hi) = snapshot
        .instant_utilization
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| {
            (lo.min(u), hi.max(u))
        });
    let imbalance = if hi >= lo { hi - lo } else { 0.0 };
    RewardValue::new(
        -(record.response_time / config.reward.t_ref) - config.reward.kappa * imbalance,
    )
}

/// One Q-learning backup; returns the new `Q(s, a)`.
pub fn update_q<S: Hash + Eq + Clone>(
    q: &mut QTable<S>,
    state: &S,
    action: ActionId,
    reward: f64,
    next_state: &S,
    config: &AgentConfig,
) -> Result<f64> {
    if !reward.is_finite() {
        return Err(Error::NonFiniteReward(reward));
    }
    let target = reward + config.gamma * q.max_value(next_state);
    let entry = q.entry_mut(state, action);
    let updated = entry.value + config.alpha * (target - entry.value);
    if !updated.is_finite() {
        return Err(Error::Invariant(format!("Q-value became {updated}")));
    }
    entry.value = updated;
    entry.visits += 1;
    Ok(updated)
}
