//! The `rl-balance` experiment harness.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.

pub mod config;
pub mod experiment;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use rl_balance::metrics::{self, format_sig9, summarize, RunSummary};
use rl_balance::rl;
use rl_balance::PolicyKind;

use config::ExperimentConfig;
use experiment::{
    compare, eval_trace, evaluate, median, thread_pool, train_agent, train_all, write_training,
};

pub const SWEEP_CSV_HEADER: &str =
    "load_multiplier,policy,seed,mean_rt,p95_rt,completion_rate,std_util";

/// Bad invocation or invalid configuration (exit code 2).
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Simulate one policy on one seed.
    Run,
    /// Evaluate every configured policy on shared traces.
    Compare,
    /// Repeat the comparison at several offered loads.
    Sweep,
    /// Train the Q-learning agent and persist its table.
    Train,
}

#[derive(Debug, Parser)]
#[command(
    name = "rl-balance",
    version,
    about = "Load-balancing simulator and experiment harness"
)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Policy for `run`: round_robin | least_connections | weighted | rl.
    #[arg(long)]
    pub policy: Option<String>,
    /// Restrict to a single seed (default for `run`: the first config seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pre-trained Q-table for `run --policy rl`.
    #[arg(long)]
    pub qtable: Option<PathBuf>,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 2;
    }
    match err.downcast_ref::<rl_balance::Error>() {
        Some(rl_balance::Error::UnknownPolicy { .. }) | Some(rl_balance::Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = ExperimentConfig::load(&cli.config)?;
    if cli.command != Command::Run {
        if cli.policy.is_some() {
            return Err(UsageError("--policy only applies to `run`".into()).into());
        }
        if cli.qtable.is_some() {
            return Err(UsageError("--qtable only applies to `run`".into()).into());
        }
    }
    let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
    let seeds = match cli.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    match cli.command {
        Command::Run => {
            let name = cli.policy.as_deref().ok_or_else(|| {
                UsageError(format!(
                    "`run` needs --policy <{}>",
                    PolicyKind::valid_names()
                ))
            })?;
            let kind: PolicyKind = name
                .parse()
                .map_err(|e: rl_balance::Error| UsageError(e.to_string()))?;
            cmd_run(&config, kind, seeds[0], &out, cli.qtable.as_deref())
        }
        Command::Compare => cmd_compare(&config, &seeds, &out),
        Command::Sweep => cmd_sweep(&config, &seeds, &out),
        Command::Train => cmd_train(&config, &seeds, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// One policy, one seed. `rl` loads `qtable` if given, else trains first and
/// writes `qtable.csv` and `learning_curve.csv` next to the run outputs.
pub fn cmd_run(
    config: &ExperimentConfig,
    kind: PolicyKind,
    seed: u64,
    out: &Path,
    qtable: Option<&Path>,
) -> Result<()> {
    if qtable.is_some() && kind != PolicyKind::Rl {
        return Err(UsageError("--qtable only applies to --policy rl".into()).into());
    }
    create_dir(out)?;
    let q = match (kind, qtable) {
        (PolicyKind::Rl, Some(path)) => Some(rl::read_qtable(path)?),
        (PolicyKind::Rl, None) => {
            let outcome = train_agent(config, &config.workload, seed)?;
            write_training(&outcome, out)?;
            Some(outcome.q)
        }
        _ => None,
    };
    let trace = eval_trace(&config.workload, seed)?;
    let result = evaluate(config, kind, &trace, seed, q, true)?;
    metrics::export(std::slice::from_ref(&result), out)?;
    print_ranking(&[summarize(&result)], &mut std::io::stdout().lock())?;
    Ok(())
}

pub fn cmd_compare(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<()> {
    if config.policies.len() < 2 {
        return Err(UsageError("compare needs at least two policies".into()).into());
    }
    let pool = thread_pool()?;
    let agents = train_all(config, seeds, &pool)?;
    let cmp = compare(config, &config.workload, seeds, &agents, true, &pool)?;
    create_dir(out)?;
    metrics::export(&cmp.runs, out)?;
    for (seed, outcome) in seeds.iter().zip(&agents) {
        if let Some(outcome) = outcome {
            write_training(outcome, &out.join("training").join(format!("seed_{seed}")))?;
        }
    }
    let summaries: Vec<RunSummary> = cmp.runs.iter().map(summarize).collect();
    print_ranking(&summaries, &mut std::io::stdout().lock())?;
    Ok(())
}

pub fn cmd_sweep(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let multipliers = config
        .load_multipliers
        .as_ref()
        .ok_or_else(|| UsageError("sweep needs `[sweep] load_multipliers` in the config".into()))?;
    if config.policies.len() < 2 {
        return Err(UsageError("sweep needs at least two policies".into()).into());
    }
    let pool = thread_pool()?;
    // Agents are trained once on the configured workload and evaluated at
    // every sweep point; an overloaded cluster has no steady state to learn.
    let agents = train_all(config, seeds, &pool)?;
    let mut rows = Vec::new();
    for &m in multipliers {
        let workload = config.workload_at(m);
        let cmp = compare(config, &workload, seeds, &agents, false, &pool)?;
        let mut summaries: Vec<RunSummary> = cmp.runs.iter().map(summarize).collect();
        // Policy-major, then seed, both in config order.
        summaries.sort_by_key(|s| {
            let p = config
                .policies
                .iter()
                .position(|k| k.as_str() == s.policy_name);
            let i = seeds.iter().position(|&x| x == s.seed);
            (p, i)
        });
        log::info!("sweep: load multiplier {m} done");
        rows.extend(summaries.into_iter().map(|s| (m, s)));
    }
    create_dir(out)?;
    let path = out.join("sweep.csv");
    let mut body = String::with_capacity(64 * (rows.len() + 1));
    body.push_str(SWEEP_CSV_HEADER);
    body.push('\n');
    for (m, s) in &rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            format_sig9(*m),
            s.policy_name,
            s.seed,
            format_sig9(s.mean_rt),
            format_sig9(s.p95_rt),
            format_sig9(s.completion_rate),
            format_sig9(s.std_util_across_servers),
        ));
    }
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;

    let mut stdout = std::io::stdout().lock();
    for &m in multipliers {
        writeln!(stdout, "load multiplier {}", format_sig9(m))?;
        let at: Vec<RunSummary> = rows
            .iter()
            .filter(|(x, _)| *x == m)
            .map(|(_, s)| s.clone())
            .collect();
        print_ranking(&at, &mut stdout)?;
    }
    Ok(())
}

/// Trains one agent per seed into `<out>/seed_<seed>/`.
pub fn cmd_train(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let pool = thread_pool()?;
    let outcomes: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| train_agent(config, &config.workload, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{:>20} {:>8} {:>12} {:>12}",
        "seed", "states", "first_window", "last_window"
    )?;
    for (seed, outcome) in seeds.iter().zip(&outcomes) {
        write_training(outcome, &out.join(format!("seed_{seed}")))?;
        let curve = &outcome.learning_curve;
        let show = |p: Option<&rl::CurvePoint>| {
            p.map_or("-".to_string(), |p| format_sig9(p.mean_reward_window))
        };
        writeln!(
            stdout,
            "{:>20} {:>8} {:>12} {:>12}",
            seed,
            outcome.q.states(),
            show(curve.first()),
            show(curve.last())
        )?;
    }
    Ok(())
}

/// Per-policy medians over seeds, best mean response time first.
pub fn print_ranking(summaries: &[RunSummary], w: &mut impl Write) -> Result<()> {
    let mut names: Vec<&str> = Vec::new();
    for s in summaries {
        if !names.contains(&s.policy_name.as_str()) {
            names.push(&s.policy_name);
        }
    }
    let mut rows: Vec<(&str, [f64; 4])> = names
        .into_iter()
        .map(|name| {
            let of = |f: fn(&RunSummary) -> f64| {
                let xs: Vec<f64> = summaries
                    .iter()
                    .filter(|s| s.policy_name == name)
                    .map(f)
                    .collect();
                median(&xs)
            };
            (
                name,
                [
                    of(|s| s.mean_rt),
                    of(|s| s.p95_rt),
                    of(|s| s.completion_rate),
                    of(|s| s.std_util_across_servers),
                ],
            )
        })
        .collect();
    rows.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
    writeln!(
        w,
        "{:>4} {:<18} {:>12} {:>12} {:>16} {:>10}",
        "rank", "policy", "mean_rt", "p95_rt", "completion_rate", "std_util"
    )?;
    for (i, (name, v)) in rows.iter().enumerate() {
        writeln!(
            w,
            "{:>4} {:<18} {:>12} {:>12} {:>16} {:>10}",
            i + 1,
            name,
            format_sig9(v[0]),
            format_sig9(v[1]),
            format_sig9(v[2]),
            format_sig9(v[3])
        )?;
    }
    Ok(())
}
