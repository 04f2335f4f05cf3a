use rl_balance::policies::{RoundRobin, WeightedRoundRobin};
use rl_balance::rl::mdp::{max_norm_gap, q_learning, toy_ring_mdp, value_iteration};
use rl_balance::rl::AgentConfig;
use rl_balance::sim::{run, RunOptions, ServerSpec};
use rl_balance::workload::{generate_trace, SizeDist, TrafficKind, WorkloadSpec};

fn learner() -> AgentConfig {
    AgentConfig {
        alpha: 0.1,
        gamma: 0.9,
        ..AgentConfig::default()
    }
}

#[test]
fn q_learning_converges_to_value_iteration_on_toy_ring() {
    let mdp = toy_ring_mdp();
    let q_star = value_iteration(&mdp, 0.9, 1e-12).unwrap();
    for seed in 1..=5 {
        let q = q_learning(&mdp, &learner(), 0.1, 100_000, 0, seed).unwrap();
        let gap = max_norm_gap(&q, &q_star);
        assert!(gap < 0.01, "seed {seed}: gap {gap}");
    }
}

#[test]
fn q_learning_is_reproducible() {
    let mdp = toy_ring_mdp();
    let a = q_learning(&mdp, &learner(), 0.1, 5_000, 2, 11).unwrap();
    let b = q_learning(&mdp, &learner(), 0.1, 5_000, 2, 11).unwrap();
    assert_eq!(a, b);
}

fn trace(n_tasks_hint: f64, rate: f64) -> Vec<rl_balance::Task> {
    let spec = WorkloadSpec {
        kind: TrafficKind::Bursty {
            rate_low: rate,
            rate_high: 3.0 * rate,
            mean_dwell_low: 20.0,
            mean_dwell_high: 5.0,
        },
        size_dist: SizeDist::Exponential { mean: 1.0 },
        horizon: n_tasks_hint / rate,
    };
    generate_trace(&spec, 17).unwrap().tasks
}

#[test]
fn round_robin_gives_exactly_k_tasks_per_server() {
    let specs: Vec<ServerSpec> = [1.0, 1.0, 2.0, 4.0, 0.5]
        .iter()
        .enumerate()
        .map(|(i, &v)| ServerSpec::new(i, v, 1))
        .collect();
    let n = specs.len();
    let mut tasks = trace(20_000.0, 3.0);
    let k = tasks.len() / n;
    tasks.truncate(k * n);
    let horizon = tasks.last().unwrap().arrival_time;
    let r = run(
        &specs,
        &tasks,
        &mut RoundRobin::new(),
        &RunOptions::new(horizon),
        1,
    )
    .unwrap();
    assert_eq!(r.records.len(), k * n);
    let mut counts = vec![0usize; n];
    for rec in &r.records {
        counts[rec.server_id] += 1;
        assert_eq!(rec.server_id, rec.task_id as usize % n);
    }
    assert!(counts.iter().all(|&c| c == k), "{counts:?}");
}

#[test]
fn smooth_wrr_matches_weights_every_cycle() {
    let weights = [1usize, 1, 1, 2, 2, 4];
    let specs: Vec<ServerSpec> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ServerSpec::new(i, w as f64, 1))
        .collect();
    let cycle: usize = weights.iter().sum();
    let mut tasks = trace(10_000.0, 8.0);
    tasks.truncate(tasks.len() / cycle * cycle);
    let horizon = tasks.last().unwrap().arrival_time;
    let mut policy = WeightedRoundRobin::new(weights.iter().map(|&w| w as f64).collect()).unwrap();
    let r = run(&specs, &tasks, &mut policy, &RunOptions::new(horizon), 1).unwrap();
    let mut by_task = vec![usize::MAX; tasks.len()];
    for rec in &r.records {
        by_task[rec.task_id as usize] = rec.server_id;
    }
    for (c, window) in by_task.chunks(cycle).enumerate() {
        let mut counts = vec![0usize; weights.len()];
        for &s in window {
            counts[s] += 1;
        }
        assert_eq!(counts, weights, "cycle {c}");
    }
}
