//! Cells, traces and training shared by the commands.
//!
//! Every seed gets two disjoint trace streams derived from the master seed:
//! `"eval"` (shared by all policies) and `"train"` (RL only). A cell is one
//! `(policy, seed)` simulation on the shared evaluation trace.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use rayon::ThreadPool;

use rl_balance::policies::{LeastConnections, RoundRobin, WeightedRoundRobin};
use rl_balance::rl::{self, DiscreteState, QAgent, QTable, TrainOutcome};
use rl_balance::rng::derive_seed;
use rl_balance::workload::{generate_tasks, generate_trace};
use rl_balance::{Policy, PolicyKind, RunOptions, RunResult, Task, WorkloadSpec};

use crate::config::{ExperimentConfig, RlEvaluation};
use crate::UsageError;

pub const THREADS_ENV: &str = "RL_BALANCE_THREADS";

/// Pool sized by `RL_BALANCE_THREADS` (unset: one thread per core).
pub fn thread_pool() -> Result<ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                UsageError(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))
            })?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?)
}

pub fn eval_trace(workload: &WorkloadSpec, seed: u64) -> Result<Vec<Task>> {
    Ok(generate_trace(workload, derive_seed(seed, "eval"))?.tasks)
}

/// Trains a fresh agent on `training_tasks` arrivals of the training stream.
pub fn train_agent(
    config: &ExperimentConfig,
    workload: &WorkloadSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    if config.training_tasks == 0 {
        log::warn!("seed {seed}: training_tasks is 0, the Q-table stays empty");
    }
    let count = usize::try_from(config.training_tasks).context("training_tasks too large")?;
    let trace = generate_tasks(workload, derive_seed(seed, "train"), count)?;
    let episode = match config.training_episode_tasks {
        Some(n) => usize::try_from(n).unwrap_or(usize::MAX),
        None => count.max(1),
    };
    Ok(rl::train_episodes(
        &config.cluster,
        &trace.tasks,
        &config.agent,
        seed,
        episode,
    )?)
}

pub fn make_policy(
    kind: PolicyKind,
    config: &ExperimentConfig,
    q: Option<QTable<DiscreteState>>,
) -> Result<Box<dyn Policy>> {
    Ok(match kind {
        PolicyKind::RoundRobin => Box::new(RoundRobin::new()),
        PolicyKind::LeastConnections => Box::new(LeastConnections),
        PolicyKind::Weighted => Box::new(WeightedRoundRobin::new(
            config.cluster.iter().map(|s| s.weight).collect(),
        )?),
        PolicyKind::Rl => {
            let q = q.context("rl policy needs a trained Q-table")?;
            if q.n_actions() != config.cluster.len() {
                return Err(UsageError(format!(
                    "Q-table has {} actions but the cluster has {} servers",
                    q.n_actions(),
                    config.cluster.len()
                ))
                .into());
            }
            Box::new(match config.rl_evaluation {
                RlEvaluation::Online => QAgent::online(q, config.agent.clone())?,
                RlEvaluation::Greedy => QAgent::greedy(q, config.agent.clone())?,
            })
        }
    })
}

/// One evaluation run. `sampled` controls the utilization time series.
pub fn evaluate(
    config: &ExperimentConfig,
    kind: PolicyKind,
    trace: &[Task],
    seed: u64,
    q: Option<QTable<DiscreteState>>,
    sampled: bool,
) -> Result<RunResult> {
    let mut policy = make_policy(kind, config, q)?;
    let options = RunOptions {
        horizon: config.evaluation_horizon,
        sample_interval: if sampled {
            Some(
                config
                    .sample_interval
                    .unwrap_or(RunOptions::DEFAULT_SAMPLE_INTERVAL),
            )
        } else {
            None
        },
    };
    rl_balance::run(&config.cluster, trace, policy.as_mut(), &options, seed)
        .with_context(|| format!("simulating {kind} with seed {seed}"))
}

pub struct Comparison {
    /// Ordered by seed (config order), then policy (config order).
    pub runs: Vec<RunResult>,
}

/// Trains one agent per seed on the configured workload, or nothing when
/// `rl` is not among the policies.
pub fn train_all(
    config: &ExperimentConfig,
    seeds: &[u64],
    pool: &ThreadPool,
) -> Result<Vec<Option<TrainOutcome>>> {
    if !config.policies.contains(&PolicyKind::Rl) {
        return Ok(vec![None; seeds.len()]);
    }
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| train_agent(config, &config.workload, seed).map(Some))
            .collect()
    })
}

/// Evaluates every configured policy on a common trace per seed. `agents`
/// is index-aligned with `seeds`.
pub fn compare(
    config: &ExperimentConfig,
    workload: &WorkloadSpec,
    seeds: &[u64],
    agents: &[Option<TrainOutcome>],
    sampled: bool,
    pool: &ThreadPool,
) -> Result<Comparison> {
    pool.install(|| {
        let traces: Vec<Vec<Task>> = seeds
            .par_iter()
            .map(|&seed| eval_trace(workload, seed))
            .collect::<Result<_>>()?;
        let cells: Vec<(usize, PolicyKind)> = (0..seeds.len())
            .flat_map(|i| config.policies.iter().map(move |&p| (i, p)))
            .collect();
        let runs = cells
            .par_iter()
            .map(|&(i, kind)| {
                let q = agents[i].as_ref().map(|t| t.q.clone());
                evaluate(config, kind, &traces[i], seeds[i], q, sampled)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Comparison { runs })
    })
}

/// Writes `qtable.csv` and `learning_curve.csv` into `dir`.
pub fn write_training(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    rl::write_qtable(&outcome.q, &dir.join("qtable.csv"))?;
    rl::write_learning_curve(&outcome.learning_curve, &dir.join("learning_curve.csv"))?;
    Ok(())
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_both_parities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
