//! Explicit finite MDPs, value iteration, and a Q-learning harness that
//! drives the same `select_action` / `update_q` used by the dispatcher.
//! Value iteration serves as the reference the learner is checked against.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::{select_action, update_q, ActionId, AgentConfig, QTable};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `transitions[s][a]` lists `(next_state, probability)`.
    transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected immediate reward `rewards[s][a]`.
    rewards: Vec<Vec<f64>>,
}

impl FiniteMdp {
    pub fn new(transitions: Vec<Vec<Vec<(usize, f64)>>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = transitions.len();
        if n_states == 0 || rewards.len() != n_states {
            return Err(Error::Config(
                "mdp: need matching, non-empty transition and reward tables".into(),
            ));
        }
        let n_actions = transitions[0].len();
        if n_actions == 0 {
            return Err(Error::Config("mdp: need at least one action".into()));
        }
        for (s, (row, rrow)) in transitions.iter().zip(&rewards).enumerate() {
            if row.len() != n_actions || rrow.len() != n_actions {
                return Err(Error::Config(format!(
                    "mdp: state {s} has the wrong number of actions"
                )));
            }
            for (a, outcomes) in row.iter().enumerate() {
                let total: f64 = outcomes.iter().map(|&(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9
                    || outcomes
                        .iter()
                        .any(|&(t, p)| t >= n_states || !(0.0..=1.0).contains(&p))
                {
                    return Err(Error::Config(format!(
                        "mdp: bad transition distribution at ({s}, {a})"
                    )));
                }
                if !rrow[a].is_finite() {
                    return Err(Error::Config(format!(
                        "mdp: non-finite reward at ({s}, {a})"
                    )));
                }
            }
        }
        Ok(FiniteMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
        })
    }

    /// Every `(s, a)` leads to `next[s][a]` with certainty.
    pub fn deterministic(next: Vec<Vec<usize>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let transitions = next
            .into_iter()
            .map(|row| row.into_iter().map(|t| vec![(t, 1.0)]).collect())
            .collect();
        Self::new(transitions, rewards)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s][a]
    }

    /// Samples a successor with one uniform draw.
    pub fn step<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        let outcomes = &self.transitions[s][a];
        let next = if outcomes.len() == 1 {
            outcomes[0].0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = outcomes[outcomes.len() - 1].0;
            for &(t, p) in outcomes {
                acc += p;
                if u < acc {
                    pick = t;
                    break;
                }
            }
            pick
        };
        (next, self.rewards[s][a])
    }
}

/// The 4-state, 2-action deterministic ring used to validate the learner.
///
/// Action 0 advances to the next state around the ring, action 1 stays put.
/// Advancing out of state 3 pays 1.0; staying in state 0 pays 0.5 and in
/// state 2 pays 0.2; everything else pays 0.
pub fn toy_ring_mdp() -> FiniteMdp {
    FiniteMdp::deterministic(
        vec![vec![1, 0], vec![2, 1], vec![3, 2], vec![0, 3]],
        vec![
            vec![0.0, 0.5],
            vec![0.0, 0.0],
            vec![0.0, 0.2],
            vec![1.0, 0.0],
        ],
    )
    .expect("toy mdp is well formed")
}

/// Bellman optimality backups until the max-norm change drops below
/// `tolerance`. Returns `Q*[s][a]`.
pub fn value_iteration(mdp: &FiniteMdp, gamma: f64, tolerance: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(
            "value iteration needs gamma in [0, 1)".into(),
        ));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::Config("value iteration needs tolerance > 0".into()));
    }
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        for (s, row) in q.iter_mut().enumerate() {
            for (a, value) in row.iter_mut().enumerate() {
                let expected_next: f64 = mdp.transitions[s][a].iter().map(|&(t, p)| p * v[t]).sum();
                let backed_up = mdp.rewards[s][a] + gamma * expected_next;
                delta = delta.max((backed_up - *value).abs());
                *value = backed_up;
            }
        }
        if delta < tolerance {
            return Ok(q);
        }
    }
}

/// Runs `steps` epsilon-greedy Q-learning transitions from `start`.
pub fn q_learning(
    mdp: &FiniteMdp,
    config: &AgentConfig,
    epsilon: f64,
    steps: usize,
    start: usize,
    seed: u64,
) -> Result<QTable<usize>> {
    let mut q = QTable::new(mdp.n_actions);
    let mut policy_rng = rng::stream(seed, Stream::Policy);
    let mut env_rng = rng::stream(seed, Stream::Arrival);
    let mut s = start;
    for _ in 0..steps {
        let a = select_action(&q, &s, epsilon, &mut policy_rng);
        let (next, r) = mdp.step(s, a.0, &mut env_rng);
        update_q(&mut q, &s, a, r, &next, config)?;
        s = next;
    }
    Ok(q)
}

/// `max |Q(s,a) - Q*(s,a)|` over every state and action.
pub fn max_norm_gap(q: &QTable<usize>, q_star: &[Vec<f64>]) -> f64 {
    q_star
        .iter()
        .enumerate()
        .flat_map(|(s, row)| row.iter().enumerate().map(move |(a, &v)| (s, a, v)))
        .map(|(s, a, v)| (q.get(&s, ActionId(a)) - v).abs())
        .fold(0.0, f64::max)
}
