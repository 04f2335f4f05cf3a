//! Dispatch policies.
//!
//! A [`Policy`] picks a server for every arriving task from the current
//! [`ClusterSnapshot`]. The three baselines here never touch the random
//! stream, so they cannot perturb the draws of anything else in a run.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::CompletedTaskRecord;
use crate::rng::SimRng;
use crate::sim::{ClusterSnapshot, Task};

pub trait Policy {
    fn name(&self) -> &str;

    /// Returns a server id in `0..snapshot.servers()`.
    fn choose(&mut self, snapshot: &ClusterSnapshot, task: &Task, rng: &mut SimRng) -> usize;

    /// Called after every completion with the post-completion snapshot.
    fn on_completion(&mut self, _record: &CompletedTaskRecord, _snapshot: &ClusterSnapshot) {}
}

/// Names accepted on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    RoundRobin,
    LeastConnections,
    Weighted,
    Rl,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::RoundRobin,
        PolicyKind::LeastConnections,
        PolicyKind::Weighted,
        PolicyKind::Rl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::LeastConnections => "least_connections",
            PolicyKind::Weighted => "weighted",
            PolicyKind::Rl => "rl",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(PolicyKind::as_str).join(" | ")
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownPolicy {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Cycles through servers in id order.
#[derive(Debug, Default, Clone)]
pub struct RoundRobin {
    counter: u64,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_server(&mut self, servers: usize) -> usize {
        let pick = (self.counter % servers as u64) as usize;
        self.counter += 1;
        pick
    }
}

impl Policy for RoundRobin {
    fn name(&self) -> &str {
        "round_robin"
    }

    fn choose(&mut self, snapshot: &ClusterSnapshot, _task: &Task, _rng: &mut SimRng) -> usize {
        self.next_server(snapshot.servers())
    }
}

/// Fewest in-service plus queued tasks; lowest id on ties.
#[derive(Debug, Default, Clone, Copy)]
pub struct LeastConnections;

impl LeastConnections {
    pub fn pick(snapshot: &ClusterSnapshot) -> usize {
        (0..snapshot.servers())
            .min_by_key(|&i| snapshot.connections(i))
            .unwrap_or(0)
    }
}

impl Policy for LeastConnections {
    fn name(&self) -> &str {
        "least_connections"
    }

    fn choose(&mut self, snapshot: &ClusterSnapshot, _task: &Task, _rng: &mut SimRng) -> usize {
        Self::pick(snapshot)
    }
}

/// Smooth weighted round-robin.
///
/// Each call adds every server's weight to its running counter, picks the
/// largest counter (lowest id on ties) and subtracts the weight total from
/// the winner. With integer weights every window of `sum(weights)` calls
/// selects server `i` exactly `weight_i` times, interleaved rather than in
/// runs.
#[derive(Debug, Clone)]
pub struct WeightedRoundRobin {
    weights: Vec<f64>,
    current: Vec<f64>,
    total: f64,
}

impl WeightedRoundRobin {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config(
                "weighted policy needs at least one server".into(),
            ));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!(
                "weighted policy: weight of server {i} must be > 0"
            )));
        }
        let total = weights.iter().sum();
        let current = vec![0.0; weights.len()];
        Ok(WeightedRoundRobin {
            weights,
            current,
            total,
        })
    }

    pub fn next_server(&mut self) -> usize {
        let mut best = 0;
        for i in 0..self.weights.len() {
            self.current[i] += self.weights[i];
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= self.total;
        best
    }
}

impl Policy for WeightedRoundRobin {
    fn name(&self) -> &str {
        "weighted"
    }

    fn choose(&mut self, _snapshot: &ClusterSnapshot, _task: &Task, _rng: &mut SimRng) -> usize {
        self.next_server()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snapshot_with(active: &[usize]) -> ClusterSnapshot {
        ClusterSnapshot {
            now: 0.0,
            instant_utilization: active
                .iter()
                .map(|&a| if a > 0 { 1.0 } else { 0.0 })
                .collect(),
            queue_length: active.iter().map(|&a| a.saturating_sub(1)).collect(),
            in_service: active.iter().map(|&a| a.min(1)).collect(),
            active_tasks: active.iter().sum(),
            system_load: 0.0,
        }
    }

    #[test]
    fn round_robin_rotates() {
        let mut rr = RoundRobin::new();
        let picks: Vec<usize> = (0..5).map(|_| rr.next_server(3)).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1]);
        let mut rr = RoundRobin::new();
        assert!((0..10).all(|_| rr.next_server(1) == 0));
    }

    #[test]
    fn round_robin_millionth_call() {
        let mut rr = RoundRobin::new();
        for _ in 0..1_000_000 {
            rr.next_server(4);
        }
        // The (10^6 + 1)-th call sees counter 10^6.
        assert_eq!(rr.next_server(4), 1_000_000 % 4);
    }

    #[test]
    fn least_connections_picks_first_minimum() {
        assert_eq!(LeastConnections::pick(&snapshot_with(&[2, 0, 1])), 1);
        assert_eq!(LeastConnections::pick(&snapshot_with(&[4, 4, 4])), 0);
        assert_eq!(LeastConnections::pick(&snapshot_with(&[3, 3, 1, 1])), 2);
    }

    #[test]
    fn smooth_wrr_sequences() {
        let mut w = WeightedRoundRobin::new(vec![2.0, 1.0]).unwrap();
        let picks: Vec<usize> = (0..6).map(|_| w.next_server()).collect();
        assert_eq!(picks, vec![0, 1, 0, 0, 1, 0]);

        let mut w = WeightedRoundRobin::new(vec![1.0, 1.0, 1.0]).unwrap();
        let picks: Vec<usize> = (0..6).map(|_| w.next_server()).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);

        let mut w = WeightedRoundRobin::new(vec![5.0]).unwrap();
        assert!((0..20).all(|_| w.next_server() == 0));
    }

    #[test]
    fn wrr_rejects_bad_weights() {
        assert!(WeightedRoundRobin::new(vec![1.0, 0.0]).is_err());
        assert!(WeightedRoundRobin::new(vec![-2.0]).is_err());
        assert!(WeightedRoundRobin::new(vec![f64::NAN]).is_err());
        assert!(WeightedRoundRobin::new(vec![]).is_err());
    }

    #[test]
    fn policy_names_parse() {
        for k in PolicyKind::ALL {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        let err = "foo".parse::<PolicyKind>().unwrap_err().to_string();
        assert!(err.contains("round_robin") && err.contains("rl"));
    }

    proptest! {
        #[test]
        fn round_robin_balanced_over_full_cycles(n in 1usize..12, k in 1usize..20) {
            let mut rr = RoundRobin::new();
            let mut counts = vec![0usize; n];
            for _ in 0..k * n {
                counts[rr.next_server(n)] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == k));
        }

        #[test]
        fn smooth_wrr_matches_integer_weights(weights in prop::collection::vec(1u32..8, 1..7), cycles in 1usize..4) {
            let w: Vec<f64> = weights.iter().map(|&x| f64::from(x)).collect();
            let total: u32 = weights.iter().sum();
            let mut wrr = WeightedRoundRobin::new(w).unwrap();
            for _ in 0..cycles {
                let mut counts = vec![0u32; weights.len()];
                for _ in 0..total {
                    counts[wrr.next_server()] += 1;
                }
                prop_assert_eq!(&counts, &weights);
            }
        }

        #[test]
        fn least_connections_is_minimal(active in prop::collection::vec(0usize..10, 1..10)) {
            let snap = snapshot_with(&active);
            let pick = LeastConnections::pick(&snap);
            prop_assert!(active.iter().all(|&a| active[pick] <= a));
        }
    }
}
