use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{format_sig9, write_with, CompletedTaskRecord};
use crate::policies::Policy;
use crate::rng::{self, SimRng};
use crate::sim::{self, ClusterSnapshot, RunOptions, ServerSpec, Task};

use super::{
    compute_reward, discretize, select_action, update_q, ActionId, AgentConfig, DiscreteState,
    QTable,
};

/// Rewards per learning-curve point, and the sampling period in completions.
pub const CURVE_WINDOW: usize = 1000;
pub const CURVE_CSV_HEADER: &str = "tasks_seen,mean_reward_window";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Completions observed so far.
    pub tasks_seen: u64,
    /// Mean reward over the trailing `CURVE_WINDOW` completions.
    pub mean_reward_window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Learning,
    Greedy,
}

/// Q-learning dispatcher usable as a [`Policy`].
///
/// In learning mode it explores with a decaying epsilon and updates the
/// table on every completion. In greedy mode the table is frozen and every
/// decision is the argmax.
#[derive(Debug)]
pub struct QAgent {
    q: QTable<DiscreteState>,
    config: AgentConfig,
    mode: Mode,
    arrivals: u64,
    pending: HashMap<u64, (DiscreteState, ActionId)>,
    window_sum: f64,
    window_len: usize,
    completions: u64,
    curve: Vec<CurvePoint>,
    error: Option<Error>,
}

impl QAgent {
    pub fn learning(n_servers: usize, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_table(
            QTable::new(n_servers),
            config,
            Mode::Learning,
        ))
    }

    pub fn greedy(q: QTable<DiscreteState>, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_table(q, config, Mode::Greedy))
    }

    /// Keeps learning from a trained table, exploring at `epsilon_end`.
    pub fn online(q: QTable<DiscreteState>, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut agent = Self::with_table(q, config, Mode::Learning);
        agent.arrivals = agent.config.epsilon_decay_tasks;
        Ok(agent)
    }

    fn with_table(q: QTable<DiscreteState>, config: AgentConfig, mode: Mode) -> Self {
        QAgent {
            q,
            config,
            mode,
            arrivals: 0,
            pending: HashMap::new(),
            window_sum: 0.0,
            window_len: 0,
            completions: 0,
            curve: Vec::new(),
            error: None,
        }
    }

    pub fn table(&self) -> &QTable<DiscreteState> {
        &self.q
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(TrainOutcome {
            q: self.q,
            learning_curve: self.curve,
        })
    }

    fn learn(&mut self, record: &CompletedTaskRecord, snapshot: &ClusterSnapshot) -> Result<()> {
        let Some((state, action)) = self.pending.remove(&record.task_id) else {
            return Err(Error::Invariant(format!(
                "completion of task {} that the agent never dispatched",
                record.task_id
            )));
        };
        let reward = compute_reward(record, snapshot, &self.config)?.get();
        let next_state = discretize(snapshot, &self.config);
        update_q(
            &mut self.q,
            &state,
            action,
            reward,
            &next_state,
            &self.config,
        )?;

        self.completions += 1;
        self.window_sum += reward;
        self.window_len += 1;
        if self.window_len == CURVE_WINDOW {
            self.curve.push(CurvePoint {
                tasks_seen: self.completions,
                mean_reward_window: self.window_sum / CURVE_WINDOW as f64,
            });
            self.window_sum = 0.0;
            self.window_len = 0;
        }
        Ok(())
    }
}

impl Policy for QAgent {
    fn name(&self) -> &str {
        "rl"
    }

    fn choose(&mut self, snapshot: &ClusterSnapshot, task: &Task, rng: &mut SimRng) -> usize {
        let state = discretize(snapshot, &self.config);
        let epsilon = match self.mode {
            Mode::Learning => self.config.epsilon_at(self.arrivals),
            Mode::Greedy => 0.0,
        };
        let action = select_action(&self.q, &state, epsilon, rng);
        self.arrivals += 1;
        if self.mode == Mode::Learning {
            self.pending.insert(task.id, (state, action));
        }
        action.0
    }

    fn on_completion(&mut self, record: &CompletedTaskRecord, snapshot: &ClusterSnapshot) {
        if self.mode == Mode::Learning && self.error.is_none() {
            if let Err(e) = self.learn(record, snapshot) {
                self.error = Some(e);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub q: QTable<DiscreteState>,
    pub learning_curve: Vec<CurvePoint>,
}

/// Trains a fresh agent online over the whole `trace`, draining every task.
pub fn train(
    specs: &[ServerSpec],
    trace: &[Task],
    config: &AgentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_episodes(specs, trace, config, seed, trace.len().max(1))
}

/// Like [`train`], but splits `trace` into consecutive episodes of
/// `episode_tasks` arrivals. Each episode starts from an empty cluster with
/// its arrivals shifted to begin at time zero; the table, epsilon schedule
/// and learning curve carry over. A backlog built up while exploring
/// therefore cannot outlive its episode.
pub fn train_episodes(
    specs: &[ServerSpec],
    trace: &[Task],
    config: &AgentConfig,
    seed: u64,
    episode_tasks: usize,
) -> Result<TrainOutcome> {
    sim::validate_cluster(specs)?;
    sim::validate_trace(trace)?;
    if episode_tasks == 0 {
        return Err(Error::Config("episode_tasks must be > 0".into()));
    }
    let mut agent = QAgent::learning(specs.len(), config.clone())?;
    let single = episode_tasks >= trace.len();
    for (k, chunk) in trace.chunks(episode_tasks).enumerate() {
        let start = chunk[0].arrival_time;
        let tasks: Vec<Task> = chunk
            .iter()
            .map(|t| Task {
                arrival_time: t.arrival_time - start,
                ..t.clone()
            })
            .collect();
        let horizon = tasks[tasks.len() - 1].arrival_time.max(f64::MIN_POSITIVE);
        let options = RunOptions::new(horizon).without_sampling();
        let episode_seed = if single {
            seed
        } else {
            rng::derive_seed(seed, &format!("episode-{k}"))
        };
        sim::run(specs, &tasks, &mut agent, &options, episode_seed)?;
        if let Some(e) = agent.error.take() {
            return Err(e);
        }
    }
    agent.into_outcome()
}

pub fn write_learning_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{CURVE_CSV_HEADER}")?;
        for p in curve {
            writeln!(w, "{},{}", p.tasks_seen, format_sig9(p.mean_reward_window))?;
        }
        Ok(())
    })
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        what: "learning curve",
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVE_CSV_HEADER) {
        return Err(err(1, format!("expected header `{CURVE_CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (seen, mean) = l
                .split_once(',')
                .ok_or_else(|| err(i + 2, "expected 2 fields".into()))?;
            Ok(CurvePoint {
                tasks_seen: seen
                    .trim()
                    .parse()
                    .map_err(|e| err(i + 2, format!("{e}")))?,
                mean_reward_window: mean
                    .trim()
                    .parse()
                    .map_err(|e| err(i + 2, format!("{e}")))?,
            })
        })
        .collect()
}
