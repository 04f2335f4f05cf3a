//! Synthetic arrival traces.
//!
//! Traces are materialized up front so that every policy in a comparison
//! replays the identical sequence of tasks. Steady traffic is a homogeneous
//! Poisson process; bursty traffic is a two-state Markov-modulated Poisson
//! process whose modulating chain alternates between a low-rate and a
//! high-rate state with exponentially distributed dwell times. The chain
//! starts in the low state at t = 0.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::write_with;
use crate::rng::{self, SimRng, Stream};
use crate::sim::{validate_trace, SimTime, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrafficKind {
    Steady {
        rate: f64,
    },
    Bursty {
        rate_low: f64,
        rate_high: f64,
        mean_dwell_low: f64,
        mean_dwell_high: f64,
    },
}

impl TrafficKind {
    /// Long-run arrival rate.
    pub fn mean_rate(&self) -> f64 {
        match *self {
            TrafficKind::Steady { rate } => rate,
            TrafficKind::Bursty {
                rate_low,
                rate_high,
                mean_dwell_low,
                mean_dwell_high,
            } => {
                (rate_low * mean_dwell_low + rate_high * mean_dwell_high)
                    / (mean_dwell_low + mean_dwell_high)
            }
        }
    }

    /// Multiplies every arrival rate by `factor`, leaving dwell times alone.
    pub fn scaled(&self, factor: f64) -> TrafficKind {
        match *self {
            TrafficKind::Steady { rate } => TrafficKind::Steady {
                rate: rate * factor,
            },
            TrafficKind::Bursty {
                rate_low,
                rate_high,
                mean_dwell_low,
                mean_dwell_high,
            } => TrafficKind::Bursty {
                rate_low: rate_low * factor,
                rate_high: rate_high * factor,
                mean_dwell_low,
                mean_dwell_high,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    Exponential { mean: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl SizeDist {
    pub fn mean(&self) -> f64 {
        match *self {
            SizeDist::Exponential { mean } => mean,
            SizeDist::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: TrafficKind,
    pub size_dist: SizeDist,
    pub horizon: SimTime,
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.kind {
            TrafficKind::Steady { rate } => {
                if !positive(rate) {
                    problems.push("rate must be > 0");
                }
            }
            TrafficKind::Bursty {
                rate_low,
                rate_high,
                mean_dwell_low,
                mean_dwell_high,
            } => {
                if !positive(rate_low) {
                    problems.push("rate_low must be > 0");
                }
                if !positive(rate_high) || rate_high <= rate_low {
                    problems.push("rate_high must be > rate_low");
                }
                if !positive(mean_dwell_low) {
                    problems.push("mean_dwell_low must be > 0");
                }
                if !positive(mean_dwell_high) {
                    problems.push("mean_dwell_high must be > 0");
                }
            }
        }
        match self.size_dist {
            SizeDist::Exponential { mean } => {
                if !positive(mean) {
                    problems.push("size_dist.mean must be > 0");
                }
            }
            SizeDist::LogNormal { mu, sigma } => {
                if !mu.is_finite() {
                    problems.push("size_dist.mu must be finite");
                }
                if !positive(sigma) {
                    problems.push("size_dist.sigma must be > 0");
                }
            }
        }
        if !positive(self.horizon) {
            problems.push("horizon must be > 0");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("workload: {}", problems.join("; "))))
        }
    }

    pub fn mean_rate(&self) -> f64 {
        self.kind.mean_rate()
    }

    /// Same shape with arrival rates scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> WorkloadSpec {
        WorkloadSpec {
            kind: self.kind.scaled(factor),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrace {
    pub tasks: Vec<Task>,
    /// Hex SHA-256 prefix identifying how the trace was produced.
    pub spec_fingerprint: String,
}

impl TaskTrace {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn spec_fingerprint(spec: &WorkloadSpec, seed: u64, count: Option<usize>) -> Result<String> {
    let json = serde_json::to_vec(spec)?;
    let count = count.map_or(u64::MAX, |c| c as u64);
    Ok(fingerprint(&[
        &json,
        &seed.to_le_bytes(),
        &count.to_le_bytes(),
    ]))
}

fn exp_sample(rng: &mut SimRng, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Arrival instants of a (possibly modulated) Poisson process.
#[derive(Debug)]
pub(crate) struct ArrivalProcess {
    kind: TrafficKind,
    arrivals: SimRng,
    modulation: SimRng,
    now: SimTime,
    high: bool,
    dwell_end: SimTime,
}

impl ArrivalProcess {
    /// No validation; degenerate parameters such as equal low/high rates are
    /// allowed here. A bursty process starts in its stationary distribution:
    /// high with probability `mean_dwell_high / (mean_dwell_low + mean_dwell_high)`.
    pub(crate) fn new(kind: TrafficKind, seed: u64) -> Self {
        let arrivals = rng::stream(seed, Stream::Arrival);
        let mut modulation = rng::stream(seed, Stream::BurstState);
        let (high, dwell_end) = match kind {
            TrafficKind::Steady { .. } => (false, f64::INFINITY),
            TrafficKind::Bursty {
                mean_dwell_low,
                mean_dwell_high,
                ..
            } => {
                let u: f64 = modulation.random();
                let high = u < mean_dwell_high / (mean_dwell_low + mean_dwell_high);
                let mean_dwell = if high {
                    mean_dwell_high
                } else {
                    mean_dwell_low
                };
                (high, exp_sample(&mut modulation, 1.0 / mean_dwell))
            }
        };
        ArrivalProcess {
            kind,
            arrivals,
            modulation,
            now: 0.0,
            high,
            dwell_end,
        }
    }

    pub(crate) fn next_arrival(&mut self) -> SimTime {
        match self.kind {
            TrafficKind::Steady { rate } => {
                self.now += exp_sample(&mut self.arrivals, rate);
                self.now
            }
            TrafficKind::Bursty {
                rate_low,
                rate_high,
                mean_dwell_low,
                mean_dwell_high,
            } => loop {
                let rate = if self.high { rate_high } else { rate_low };
                let candidate = self.now + exp_sample(&mut self.arrivals, rate);
                if candidate < self.dwell_end {
                    self.now = candidate;
                    return candidate;
                }
                // Memoryless: restart the arrival clock at the state switch.
                self.now = self.dwell_end;
                self.high = !self.high;
                let mean_dwell = if self.high {
                    mean_dwell_high
                } else {
                    mean_dwell_low
                };
                self.dwell_end = self.now + exp_sample(&mut self.modulation, 1.0 / mean_dwell);
            },
        }
    }
}

struct SizeSampler {
    dist: SizeDist,
    lognormal: Option<LogNormal<f64>>,
    rng: SimRng,
}

impl SizeSampler {
    fn new(dist: &SizeDist, seed: u64) -> Result<Self> {
        let lognormal = match *dist {
            SizeDist::LogNormal { mu, sigma } => Some(
                LogNormal::new(mu, sigma).map_err(|e| Error::Config(format!("size_dist: {e}")))?,
            ),
            SizeDist::Exponential { .. } => None,
        };
        Ok(SizeSampler {
            dist: dist.clone(),
            lognormal,
            rng: rng::stream(seed, Stream::Size),
        })
    }

    fn sample(&mut self) -> f64 {
        loop {
            let x = match (&self.dist, &self.lognormal) {
                (SizeDist::Exponential { mean }, _) => mean * self.rng.sample::<f64, _>(Exp1),
                (_, Some(ln)) => ln.sample(&mut self.rng),
                (SizeDist::LogNormal { .. }, None) => {
                    unreachable!("sampler built without lognormal")
                }
            };
            if x > 0.0 && x.is_finite() {
                return x;
            }
        }
    }
}

/// All arrivals in `[0, spec.horizon]`.
pub fn generate_trace(spec: &WorkloadSpec, seed: u64) -> Result<TaskTrace> {
    spec.validate()?;
    let mut arrivals = ArrivalProcess::new(spec.kind.clone(), seed);
    let mut sizes = SizeSampler::new(&spec.size_dist, seed)?;
    let mut tasks = Vec::with_capacity((spec.mean_rate() * spec.horizon * 1.05) as usize + 16);
    loop {
        let t = arrivals.next_arrival();
        if t > spec.horizon {
            break;
        }
        tasks.push(Task::new(tasks.len() as u64, t, sizes.sample()));
    }
    Ok(TaskTrace {
        tasks,
        spec_fingerprint: spec_fingerprint(spec, seed, None)?,
    })
}

/// The first `count` arrivals of the process, regardless of `spec.horizon`.
pub fn generate_tasks(spec: &WorkloadSpec, seed: u64, count: usize) -> Result<TaskTrace> {
    spec.validate()?;
    let mut arrivals = ArrivalProcess::new(spec.kind.clone(), seed);
    let mut sizes = SizeSampler::new(&spec.size_dist, seed)?;
    let tasks = (0..count as u64)
        .map(|id| {
            let t = arrivals.next_arrival();
            Task::new(id, t, sizes.sample())
        })
        .collect();
    Ok(TaskTrace {
        tasks,
        spec_fingerprint: spec_fingerprint(spec, seed, Some(count))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStats {
    pub count: usize,
    pub mean_interarrival: f64,
    pub mean_size: f64,
    /// Busiest 100-second window, in arrivals per second.
    pub peak_rate_estimate: f64,
}

pub const PEAK_WINDOW: f64 = 100.0;

pub fn trace_stats(tasks: &[Task]) -> Result<TraceStats> {
    let (first, last) = match (tasks.first(), tasks.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyTrace),
    };
    let count = tasks.len();
    let mean_interarrival = if count > 1 {
        (last.arrival_time - first.arrival_time) / (count - 1) as f64
    } else {
        first.arrival_time
    };
    let mean_size = tasks.iter().map(|t| t.size).sum::<f64>() / count as f64;

    let mut best = 0usize;
    let mut end = 0usize;
    for start in 0..count {
        let limit = tasks[start].arrival_time + PEAK_WINDOW;
        while end < count && tasks[end].arrival_time < limit {
            end += 1;
        }
        best = best.max(end - start);
    }
    Ok(TraceStats {
        count,
        mean_interarrival,
        mean_size,
        peak_rate_estimate: best as f64 / PEAK_WINDOW,
    })
}

pub const TRACE_CSV_HEADER: &str = "task_id,arrival_time,size";

/// Writes a trace as CSV. Times and sizes use 17 significant digits, enough
/// for an exact round trip.
pub fn write_trace_csv(tasks: &[Task], path: &Path) -> Result<()> {
    use std::io::Write;
    write_with(path, |w| {
        writeln!(w, "{TRACE_CSV_HEADER}")?;
        for t in tasks {
            writeln!(w, "{},{:.16e},{:.16e}", t.id, t.arrival_time, t.size)?;
        }
        Ok(())
    })
}

pub fn read_trace_csv(path: &Path) -> Result<TaskTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        what: "trace csv",
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(
                1,
                format!("expected header `{TRACE_CSV_HEADER}`, got `{h}`"),
            ))
        }
        None => return Err(parse_err(1, "missing header".into())),
    }
    let mut tasks = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|e| parse_err(i + 1, format!("task_id: {e}")))?;
        let at = fields[1]
            .parse::<f64>()
            .map_err(|e| parse_err(i + 1, format!("arrival_time: {e}")))?;
        let size = fields[2]
            .parse::<f64>()
            .map_err(|e| parse_err(i + 1, format!("size: {e}")))?;
        tasks.push(Task::new(id, at, size));
    }
    validate_trace(&tasks)?;
    Ok(TaskTrace {
        tasks,
        spec_fingerprint: fingerprint(&[b"file", text.as_bytes()]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn steady(rate: f64, horizon: f64) -> WorkloadSpec {
        WorkloadSpec {
            kind: TrafficKind::Steady { rate },
            size_dist: SizeDist::Exponential { mean: 1.0 },
            horizon,
        }
    }

    fn bursty(low: f64, high: f64, horizon: f64) -> WorkloadSpec {
        WorkloadSpec {
            kind: TrafficKind::Bursty {
                rate_low: low,
                rate_high: high,
                mean_dwell_low: 50.0,
                mean_dwell_high: 10.0,
            },
            size_dist: SizeDist::Exponential { mean: 1.0 },
            horizon,
        }
    }

    #[test]
    fn steady_count_within_three_sigma() {
        for seed in [1, 2, 3] {
            let trace = generate_trace(&steady(2.0, 10_000.0), seed).unwrap();
            let sigma = 20_000f64.sqrt();
            let dev = (trace.len() as f64 - 20_000.0).abs();
            assert!(dev < 3.0 * sigma, "seed {seed}: {} arrivals", trace.len());
            assert!(trace.tasks.iter().all(|t| t.arrival_time <= 10_000.0));
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let spec = bursty(1.0, 10.0, 2_000.0);
        let a = generate_trace(&spec, 11).unwrap();
        let b = generate_trace(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(&spec, 12).unwrap();
        assert_ne!(a.spec_fingerprint, c.spec_fingerprint);
        assert_ne!(a.tasks, c.tasks);
    }

    #[test]
    fn degenerate_mmpp_is_poisson() {
        let mut p = ArrivalProcess::new(
            TrafficKind::Bursty {
                rate_low: 3.0,
                rate_high: 3.0,
                mean_dwell_low: 50.0,
                mean_dwell_high: 10.0,
            },
            5,
        );
        let n = 100_000;
        let mut last = 0.0;
        for _ in 0..n {
            last = p.next_arrival();
        }
        let mean = last / n as f64;
        assert!(
            (mean - 1.0 / 3.0).abs() / (1.0 / 3.0) < 0.02,
            "mean inter-arrival {mean}"
        );
    }

    #[test]
    fn bursty_process_starts_stationary() {
        let kind = TrafficKind::Bursty {
            rate_low: 1.0,
            rate_high: 10.0,
            mean_dwell_low: 50.0,
            mean_dwell_high: 10.0,
        };
        let n = 20_000;
        let high = (0..n)
            .filter(|&seed| ArrivalProcess::new(kind.clone(), seed).high)
            .count();
        let frac = high as f64 / n as f64;
        // P(high) = 10 / 60; binomial sigma is about 0.0026.
        assert!((frac - 1.0 / 6.0).abs() < 0.01, "{frac}");
    }

    #[test]
    fn steady_interarrival_mean() {
        let trace = generate_tasks(&steady(2.0, 1.0), 9, 100_000).unwrap();
        let stats = trace_stats(&trace.tasks).unwrap();
        assert_eq!(stats.count, 100_000);
        assert!((stats.mean_interarrival - 0.5).abs() / 0.5 < 0.02);
        assert!((stats.mean_size - 1.0).abs() < 0.02);
    }

    #[test]
    fn bursty_peak_exceeds_mean_rate() {
        let spec = bursty(1.0, 10.0, 100_000.0);
        let trace = generate_trace(&spec, 4).unwrap();
        let stats = trace_stats(&trace.tasks).unwrap();
        assert!(stats.peak_rate_estimate > spec.mean_rate());
        let empirical = trace.len() as f64 / spec.horizon;
        assert!(
            (empirical - spec.mean_rate()).abs() / spec.mean_rate() < 0.05,
            "{empirical}"
        );
    }

    #[test]
    fn stats_of_two_tasks() {
        let tasks = vec![Task::new(0, 0.0, 1.0), Task::new(1, 1.0, 3.0)];
        let s = trace_stats(&tasks).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.mean_interarrival, 1.0);
        assert_eq!(s.mean_size, 2.0);
        assert_eq!(s.peak_rate_estimate, 0.02);
        assert!(matches!(trace_stats(&[]), Err(Error::EmptyTrace)));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(generate_trace(&steady(0.0, 10.0), 1).is_err());
        assert!(generate_trace(&steady(1.0, 0.0), 1).is_err());
        assert!(generate_trace(&steady(-1.0, 10.0), 1).is_err());
        assert!(generate_trace(&bursty(2.0, 2.0, 10.0), 1).is_err());
        assert!(generate_trace(&bursty(3.0, 2.0, 10.0), 1).is_err());
        let mut ln = steady(1.0, 10.0);
        ln.size_dist = SizeDist::LogNormal {
            mu: 0.0,
            sigma: 0.0,
        };
        assert!(ln.validate().is_err());
    }

    #[test]
    fn lognormal_sizes_positive_with_expected_mean() {
        let mut spec = steady(1.0, 1.0);
        spec.size_dist = SizeDist::LogNormal {
            mu: -0.125,
            sigma: 0.5,
        };
        let trace = generate_tasks(&spec, 3, 50_000).unwrap();
        let stats = trace_stats(&trace.tasks).unwrap();
        assert!(trace.tasks.iter().all(|t| t.size > 0.0));
        assert!((stats.mean_size - 1.0).abs() < 0.02, "{}", stats.mean_size);
    }

    #[test]
    fn scaling_keeps_shape() {
        let spec = bursty(2.0, 8.0, 100.0);
        let s = spec.scaled(0.5);
        assert_eq!(s.mean_rate(), spec.mean_rate() * 0.5);
        assert_eq!(
            s.kind,
            TrafficKind::Bursty {
                rate_low: 1.0,
                rate_high: 4.0,
                mean_dwell_low: 50.0,
                mean_dwell_high: 10.0
            }
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let trace = generate_trace(&bursty(1.0, 5.0, 500.0), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&trace.tasks, &path).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.tasks, trace.tasks);
    }

    #[test]
    fn csv_rejects_unsorted_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "task_id,arrival_time,size\n0,2.0,1.0\n1,1.0,1.0\n").unwrap();
        assert!(matches!(
            read_trace_csv(&path),
            Err(Error::UnsortedTrace { task_id: 1 })
        ));
        fs::write(&path, "id,t,size\n").unwrap();
        assert!(matches!(read_trace_csv(&path), Err(Error::Parse { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn traces_sorted_with_positive_sizes(seed in any::<u64>(), low in 0.1f64..5.0, ratio in 1.1f64..10.0) {
            let trace = generate_trace(&bursty(low, low * ratio, 200.0), seed).unwrap();
            prop_assert!(validate_trace(&trace.tasks).is_ok());
            prop_assert!(trace.tasks.iter().all(|t| t.size > 0.0));
        }
    }
}
