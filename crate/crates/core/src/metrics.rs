//! Run records, summary statistics and file export.
//!
//! Utilization is a single slot-based scalar per server: the fraction of slot
//! capacity busy serving tasks. It is reported two ways, instantaneous
//! (occupied slots / slots) and cumulative time-averaged (busy slot-seconds
//! divided by elapsed seconds times slots).
//!
//! Exported numbers are rounded half-to-even to 9 significant digits so that
//! identical runs produce byte-identical files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sim::{Cluster, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedTaskRecord {
    pub task_id: u64,
    pub server_id: usize,
    pub arrival_time: SimTime,
    pub start_time: SimTime,
    pub completion_time: SimTime,
    /// `completion_time - arrival_time`, queueing included.
    pub response_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub time: SimTime,
    pub server_id: usize,
    pub time_avg_utilization: f64,
    pub instant_utilization: f64,
    pub queue_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy_name: String,
    pub seed: u64,
    pub tasks_arrived: usize,
    pub tasks_completed_in_window: usize,
    #[serde(serialize_with = "sig9")]
    pub completion_rate: f64,
    #[serde(serialize_with = "sig9")]
    pub mean_rt: f64,
    #[serde(serialize_with = "sig9")]
    pub p50_rt: f64,
    #[serde(serialize_with = "sig9")]
    pub p95_rt: f64,
    #[serde(serialize_with = "sig9")]
    pub p99_rt: f64,
    #[serde(serialize_with = "sig9")]
    pub mean_util: f64,
    #[serde(serialize_with = "sig9")]
    pub std_util_across_servers: f64,
    /// Set when the run saw no arrivals; `completion_rate` is then 1.0 by
    /// convention.
    #[serde(skip)]
    pub no_arrivals: bool,
}

/// Accumulates records and samples while a run is in progress.
#[derive(Debug, Default)]
pub struct Collector {
    pub(crate) records: Vec<CompletedTaskRecord>,
    pub(crate) samples: Vec<UtilizationSample>,
    seen: HashSet<u64>,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CompletedTaskRecord] {
        &self.records
    }

    pub fn samples(&self) -> &[UtilizationSample] {
        &self.samples
    }

    pub fn record_completion(&mut self, record: CompletedTaskRecord) -> Result<()> {
        if !self.seen.insert(record.task_id) {
            return Err(Error::DuplicateRecord(record.task_id));
        }
        self.records.push(record);
        Ok(())
    }

    /// Appends one sample per server at time `now`.
    pub fn sample_utilization(&mut self, cluster: &Cluster, now: SimTime) {
        for s in &cluster.servers {
            self.samples.push(UtilizationSample {
                time: now,
                server_id: s.spec.server_id,
                time_avg_utilization: s.time_avg_utilization(now),
                instant_utilization: s.in_service.len() as f64 / s.spec.slots as f64,
                queue_length: s.wait_queue.len(),
            });
        }
    }

    pub fn last_sample_time(&self) -> Option<SimTime> {
        self.samples.last().map(|s| s.time)
    }
}

/// Everything one simulation run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub policy_name: String,
    pub seed: u64,
    pub horizon: SimTime,
    pub tasks_arrived: usize,
    /// Slot count per server, for reconstructing occupancy from samples.
    pub slots: Vec<usize>,
    /// In completion order.
    pub records: Vec<CompletedTaskRecord>,
    pub samples: Vec<UtilizationSample>,
    /// Time-averaged utilization per server over `[0, horizon]`.
    pub final_utilization: Vec<f64>,
    /// Busy slot-seconds per server over `[0, horizon]`.
    pub busy_at_horizon: Vec<f64>,
}

impl RunResult {
    /// Time-averaged number of tasks in the system (in service plus queued),
    /// estimated from the utilization time series.
    pub fn mean_tasks_in_system(&self) -> Option<f64> {
        let n = self.slots.len();
        if n == 0 || self.samples.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for s in &self.samples {
            let busy = (s.instant_utilization * self.slots[s.server_id] as f64).round();
            total += busy + s.queue_length as f64;
        }
        Some(total / (self.samples.len() / n) as f64)
    }
}

/// `ceil(num/den * n)`-th order statistic of an ascending slice.
pub fn nearest_rank(sorted: &[f64], num: usize, den: usize) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (num * sorted.len()).div_ceil(den).max(1);
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(result: &RunResult) -> RunSummary {
    let horizon = result.horizon;
    let completed_in_window = result
        .records
        .iter()
        .filter(|r| r.completion_time <= horizon)
        .count();
    let no_arrivals = result.tasks_arrived == 0;
    if no_arrivals {
        log::warn!(
            "{} seed {}: no arrivals within the horizon, completion rate reported as 1.0",
            result.policy_name,
            result.seed
        );
    }
    let completion_rate = if no_arrivals {
        1.0
    } else {
        completed_in_window as f64 / result.tasks_arrived as f64
    };

    let mut rts: Vec<f64> = result.records.iter().map(|r| r.response_time).collect();
    rts.sort_by(f64::total_cmp);
    let mean_rt = mean(&rts);

    let mean_util = mean(&result.final_utilization);
    let std_util = if result.final_utilization.is_empty() {
        0.0
    } else {
        let var = result
            .final_utilization
            .iter()
            .map(|u| (u - mean_util).powi(2))
            .sum::<f64>()
            / result.final_utilization.len() as f64;
        var.sqrt()
    };

    RunSummary {
        policy_name: result.policy_name.clone(),
        seed: result.seed,
        tasks_arrived: result.tasks_arrived,
        tasks_completed_in_window: completed_in_window,
        completion_rate,
        mean_rt,
        p50_rt: nearest_rank(&rts, 1, 2),
        p95_rt: nearest_rank(&rts, 19, 20),
        p99_rt: nearest_rank(&rts, 99, 100),
        mean_util,
        std_util_across_servers: std_util,
        no_arrivals,
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Formats `x` with 9 significant digits (ties to even) in plain decimal
/// notation, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let point = exp + 1;

    let mut out = String::with_capacity(24);
    if negative {
        out.push('-');
    }
    if point <= 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-point) as usize));
        out.push_str(&digits);
    } else if point as usize >= digits.len() {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', point as usize - digits.len()));
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    if out.contains('.') {
        let trimmed = out.trim_end_matches('0').trim_end_matches('.').len();
        out.truncate(trimmed);
    }
    out
}

/// `x` rounded to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    format_sig9(x).parse().unwrap_or(x)
}

fn sig9<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig9(*x))
}

pub const TASKS_CSV_HEADER: &str =
    "task_id,server_id,arrival_time,start_time,completion_time,response_time";
pub const UTIL_CSV_HEADER: &str =
    "time,server_id,instant_utilization,time_avg_utilization,queue_length";

pub fn tasks_file_name(policy: &str, seed: u64) -> String {
    format!("tasks_{policy}_{seed}.csv")
}

pub fn util_file_name(policy: &str, seed: u64) -> String {
    format!("util_{policy}_{seed}.csv")
}

pub fn write_tasks_csv(records: &[CompletedTaskRecord], path: &Path) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{TASKS_CSV_HEADER}")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.task_id,
                r.server_id,
                format_sig9(r.arrival_time),
                format_sig9(r.start_time),
                format_sig9(r.completion_time),
                format_sig9(r.response_time)
            )?;
        }
        Ok(())
    })
}

pub fn write_util_csv(samples: &[UtilizationSample], path: &Path) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{UTIL_CSV_HEADER}")?;
        for s in samples {
            writeln!(
                w,
                "{},{},{},{},{}",
                format_sig9(s.time),
                s.server_id,
                format_sig9(s.instant_utilization),
                format_sig9(s.time_avg_utilization),
                s.queue_length
            )?;
        }
        Ok(())
    })
}

pub fn write_summary_json(summaries: &[RunSummary], path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(summaries)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes per-run task and utilization CSVs plus a combined `summary.json`.
/// Returns the paths written, summary last.
pub fn export(runs: &[RunResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(2 * runs.len() + 1);
    let mut summaries = Vec::with_capacity(runs.len());
    for run in runs {
        let tasks = out_dir.join(tasks_file_name(&run.policy_name, run.seed));
        write_tasks_csv(&run.records, &tasks)?;
        let util = out_dir.join(util_file_name(&run.policy_name, run.seed));
        write_util_csv(&run.samples, &util)?;
        written.push(tasks);
        written.push(util);
        summaries.push(summarize(run));
    }
    let summary = out_dir.join("summary.json");
    write_summary_json(&summaries, &summary)?;
    written.push(summary);
    Ok(written)
}

pub(crate) fn write_with(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
