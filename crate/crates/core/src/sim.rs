//! Discrete-event engine for the server pool.
//!
//! Time advances by jumping between events held in an [`EventQueue`], ordered
//! by `(time, seq)` where `seq` is a global insertion counter. Each server
//! serves up to `slots` tasks in parallel and keeps the rest in a FIFO wait
//! queue; a task of size `s` on a server of speed `v` occupies one slot for
//! exactly `s / v` seconds. There is no preemption, migration or dropping.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Collector, CompletedTaskRecord, RunResult};
use crate::policies::Policy;
use crate::rng::{self, Stream};

/// Simulated seconds.
pub type SimTime = f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub arrival_time: SimTime,
    /// Abstract work units; service time is `size / speed`.
    pub size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_window: Option<f64>,
}

impl Task {
    pub fn new(id: u64, arrival_time: SimTime, size: f64) -> Self {
        Task {
            id,
            arrival_time,
            size,
            deadline_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub server_id: usize,
    /// Work units per second.
    pub speed: f64,
    /// Tasks served concurrently.
    pub slots: usize,
    /// Static weight for weighted round-robin.
    pub weight: f64,
}

impl ServerSpec {
    pub fn new(server_id: usize, speed: f64, slots: usize) -> Self {
        ServerSpec {
            server_id,
            speed,
            slots,
            weight: speed,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Checks the per-server and whole-pool invariants of a cluster description.
pub fn validate_cluster(specs: &[ServerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config(
            "cluster must contain at least one server".into(),
        ));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.server_id != i {
            return Err(Error::Config(format!(
                "server ids must be 0..N without gaps; position {i} has id {}",
                s.server_id
            )));
        }
        if !(s.speed.is_finite() && s.speed > 0.0) {
            return Err(Error::Config(format!("server {i}: speed must be > 0")));
        }
        if s.slots == 0 {
            return Err(Error::Config(format!("server {i}: slots must be >= 1")));
        }
        if !(s.weight.is_finite() && s.weight > 0.0) {
            return Err(Error::Config(format!("server {i}: weight must be > 0")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InService {
    pub task: Task,
    pub start_time: SimTime,
    pub end_time: SimTime,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub spec: ServerSpec,
    pub in_service: Vec<InService>,
    pub wait_queue: VecDeque<Task>,
    /// Slot-seconds of service accumulated up to `accounted_until`.
    pub busy_work_time: f64,
    accounted_until: SimTime,
}

impl ServerState {
    pub fn new(spec: ServerSpec) -> Self {
        ServerState {
            spec,
            in_service: Vec::new(),
            wait_queue: VecDeque::new(),
            busy_work_time: 0.0,
            accounted_until: 0.0,
        }
    }

    pub fn has_free_slot(&self) -> bool {
        self.in_service.len() < self.spec.slots
    }

    /// In-service plus queued tasks.
    pub fn active(&self) -> usize {
        self.in_service.len() + self.wait_queue.len()
    }

    /// Busy slot-seconds over `[0, now]`, assuming no state change since the
    /// last accounting point.
    pub fn busy_time_at(&self, now: SimTime) -> f64 {
        self.busy_work_time + self.in_service.len() as f64 * (now - self.accounted_until).max(0.0)
    }

    /// Cumulative time-averaged utilization over `[0, now]`.
    pub fn time_avg_utilization(&self, now: SimTime) -> f64 {
        if now <= 0.0 {
            return 0.0;
        }
        (self.busy_time_at(now) / (now * self.spec.slots as f64)).clamp(0.0, 1.0)
    }

    fn account(&mut self, now: SimTime) {
        if now > self.accounted_until {
            self.busy_work_time = self.busy_time_at(now);
            self.accounted_until = now;
        }
    }

    fn start(&mut self, task: Task, now: SimTime) -> PendingCompletion {
        let end_time = now + task.size / self.spec.speed;
        let task_id = task.id;
        self.in_service.push(InService {
            task,
            start_time: now,
            end_time,
        });
        PendingCompletion {
            server_id: self.spec.server_id,
            task_id,
            time: end_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Arrival(Task),
    Completion { server_id: usize, task_id: u64 },
    EndOfHorizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

// Reversed so that `BinaryHeap` pops the least (time, seq).
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for Event {}

/// Min-queue of events keyed by `(time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time of the most recently popped event.
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `kind` at `time` and returns the sequence number assigned.
    pub fn push(&mut self, time: SimTime, kind: EventKind) -> Result<u64> {
        if !time.is_finite() || time < self.now {
            return Err(Error::EventInPast {
                event_time: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(seq)
    }

    pub fn pop_next(&mut self) -> Option<Event> {
        let ev = self.heap.pop()?;
        self.now = ev.time;
        Some(ev)
    }
}

/// A completion the engine must schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingCompletion {
    pub server_id: usize,
    pub task_id: u64,
    pub time: SimTime,
}

/// What a policy sees when it decides.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSnapshot {
    pub now: SimTime,
    /// Occupied slots / slots, per server.
    pub instant_utilization: Vec<f64>,
    pub queue_length: Vec<usize>,
    pub in_service: Vec<usize>,
    pub active_tasks: usize,
    /// Mean of `instant_utilization`.
    pub system_load: f64,
}

impl ClusterSnapshot {
    pub fn servers(&self) -> usize {
        self.instant_utilization.len()
    }

    /// In-service plus queued tasks on `server`.
    pub fn connections(&self, server: usize) -> usize {
        self.in_service[server] + self.queue_length[server]
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub servers: Vec<ServerState>,
}

impl Cluster {
    pub fn new(specs: &[ServerSpec]) -> Result<Self> {
        validate_cluster(specs)?;
        Ok(Cluster {
            servers: specs.iter().cloned().map(ServerState::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    /// Hands `task` to server `target`. Starts service immediately when a slot
    /// is free and returns the completion to schedule; otherwise the task
    /// joins the FIFO wait queue.
    pub fn assign_task(
        &mut self,
        task: Task,
        target: usize,
        now: SimTime,
    ) -> Result<Option<PendingCompletion>> {
        let servers = self.servers.len();
        let server = self.servers.get_mut(target).ok_or(Error::UnknownServer {
            server_id: target,
            servers,
        })?;
        server.account(now);
        if server.has_free_slot() {
            Ok(Some(server.start(task, now)))
        } else {
            server.wait_queue.push_back(task);
            Ok(None)
        }
    }

    /// Finishes `task_id` on `server_id` at `now`, pulling the next queued task
    /// into service if there is one.
    pub fn complete_task(
        &mut self,
        server_id: usize,
        task_id: u64,
        now: SimTime,
    ) -> Result<(CompletedTaskRecord, Option<PendingCompletion>)> {
        let servers = self.servers.len();
        let server = self
            .servers
            .get_mut(server_id)
            .ok_or(Error::UnknownServer { server_id, servers })?;
        let idx = server
            .in_service
            .iter()
            .position(|s| s.task.id == task_id)
            .ok_or_else(|| {
                Error::Invariant(format!(
                    "task {task_id} is not in service on server {server_id}"
                ))
            })?;
        if server.in_service[idx].end_time != now {
            return Err(Error::Invariant(format!(
                "task {task_id} completes at t={now} but was due at t={}",
                server.in_service[idx].end_time
            )));
        }
        server.account(now);
        let done = server.in_service.swap_remove(idx);
        let record = CompletedTaskRecord {
            task_id,
            server_id,
            arrival_time: done.task.arrival_time,
            start_time: done.start_time,
            completion_time: now,
            response_time: now - done.task.arrival_time,
        };
        let next = server
            .wait_queue
            .pop_front()
            .map(|task| server.start(task, now));
        Ok((record, next))
    }

    pub fn snapshot(&self, now: SimTime) -> ClusterSnapshot {
        let n = self.servers.len();
        let mut instant_utilization = Vec::with_capacity(n);
        let mut queue_length = Vec::with_capacity(n);
        let mut in_service = Vec::with_capacity(n);
        let mut active_tasks = 0;
        for s in &self.servers {
            instant_utilization.push(s.in_service.len() as f64 / s.spec.slots as f64);
            queue_length.push(s.wait_queue.len());
            in_service.push(s.in_service.len());
            active_tasks += s.active();
        }
        let system_load = if n == 0 {
            0.0
        } else {
            instant_utilization.iter().sum::<f64>() / n as f64
        };
        ClusterSnapshot {
            now,
            instant_utilization,
            queue_length,
            in_service,
            active_tasks,
            system_load,
        }
    }

    /// Tasks currently in service or queued anywhere in the pool.
    pub fn tasks_in_system(&self) -> usize {
        self.servers.iter().map(ServerState::active).sum()
    }

    /// Slot capacity bounds and work conservation.
    pub fn check_invariants(&self) -> Result<()> {
        for s in &self.servers {
            if s.in_service.len() > s.spec.slots {
                return Err(Error::Invariant(format!(
                    "server {} has {} tasks in service but {} slots",
                    s.spec.server_id,
                    s.in_service.len(),
                    s.spec.slots
                )));
            }
            if !s.wait_queue.is_empty() && s.has_free_slot() {
                return Err(Error::Invariant(format!(
                    "server {} idles a slot while {} tasks wait",
                    s.spec.server_id,
                    s.wait_queue.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Arrivals after the horizon are ignored; completions after it are still
    /// simulated but fall outside the completion window.
    pub horizon: SimTime,
    /// Utilization sampling cadence; `None` disables the time series.
    pub sample_interval: Option<f64>,
}

impl RunOptions {
    pub const DEFAULT_SAMPLE_INTERVAL: f64 = 1.0;

    pub fn new(horizon: SimTime) -> Self {
        RunOptions {
            horizon,
            sample_interval: Some(Self::DEFAULT_SAMPLE_INTERVAL),
        }
    }

    pub fn without_sampling(mut self) -> Self {
        self.sample_interval = None;
        self
    }
}

/// Checks sorting and id ordering of a trace.
pub fn validate_trace(trace: &[Task]) -> Result<()> {
    for pair in trace.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.arrival_time < a.arrival_time || b.id <= a.id {
            return Err(Error::UnsortedTrace { task_id: b.id });
        }
    }
    for t in trace {
        if !(t.arrival_time.is_finite() && t.arrival_time >= 0.0) {
            return Err(Error::Config(format!(
                "task {}: invalid arrival time",
                t.id
            )));
        }
        if !(t.size.is_finite() && t.size > 0.0) {
            return Err(Error::Config(format!("task {}: size must be > 0", t.id)));
        }
    }
    Ok(())
}

/// Simulates `trace` on a fresh cluster, dispatching every arrival with
/// `policy`. Identical inputs give bit-identical results.
pub fn run(
    specs: &[ServerSpec],
    trace: &[Task],
    policy: &mut dyn Policy,
    options: &RunOptions,
    seed: u64,
) -> Result<RunResult> {
    let horizon = options.horizon;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config("horizon must be finite and > 0".into()));
    }
    if let Some(dt) = options.sample_interval {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config("sample interval must be > 0".into()));
        }
    }
    validate_trace(trace)?;
    let mut cluster = Cluster::new(specs)?;
    let mut rng = rng::stream(seed, Stream::Policy);
    let mut collector = Collector::new();
    let mut queue = EventQueue::new();

    let admitted = trace.partition_point(|t| t.arrival_time <= horizon);
    let mut arrivals = trace[..admitted].iter();
    let mut arrived = 0usize;
    let mut final_utilization = Vec::new();
    let mut busy_at_horizon = Vec::new();
    let mut next_sample_index = 1u64;

    queue.push(horizon, EventKind::EndOfHorizon)?;
    if let Some(first) = arrivals.next() {
        queue.push(first.arrival_time, EventKind::Arrival(first.clone()))?;
    }

    while let Some(event) = queue.pop_next() {
        let now = event.time;
        if let Some(dt) = options.sample_interval {
            loop {
                let t = next_sample_index as f64 * dt;
                if t > now || t > horizon {
                    break;
                }
                collector.sample_utilization(&cluster, t);
                next_sample_index += 1;
            }
        }

        match event.kind {
            EventKind::Arrival(task) => {
                arrived += 1;
                if let Some(next) = arrivals.next() {
                    queue.push(next.arrival_time, EventKind::Arrival(next.clone()))?;
                }
                let snap = cluster.snapshot(now);
                let target = policy.choose(&snap, &task, &mut rng);
                if let Some(done) = cluster.assign_task(task, target, now)? {
                    queue.push(done.time, completion(done))?;
                }
            }
            EventKind::Completion { server_id, task_id } => {
                let (record, next) = cluster.complete_task(server_id, task_id, now)?;
                if let Some(done) = next {
                    queue.push(done.time, completion(done))?;
                }
                let snap = cluster.snapshot(now);
                policy.on_completion(&record, &snap);
                collector.record_completion(record)?;
            }
            EventKind::EndOfHorizon => {
                if options.sample_interval.is_some()
                    && collector.last_sample_time().is_none_or(|t| t < horizon)
                {
                    collector.sample_utilization(&cluster, horizon);
                }
                busy_at_horizon = cluster
                    .servers
                    .iter()
                    .map(|s| s.busy_time_at(horizon))
                    .collect();
                final_utilization = cluster
                    .servers
                    .iter()
                    .map(|s| s.time_avg_utilization(horizon))
                    .collect();
            }
        }

        if cfg!(debug_assertions) {
            cluster.check_invariants()?;
            let accounted = collector.len() + cluster.tasks_in_system() + (trace.len() - arrived);
            if accounted != trace.len() {
                return Err(Error::Invariant(format!(
                    "task conservation broken: {accounted} accounted of {}",
                    trace.len()
                )));
            }
        }
    }

    Ok(RunResult {
        policy_name: policy.name().to_string(),
        seed,
        horizon,
        tasks_arrived: arrived,
        slots: specs.iter().map(|s| s.slots).collect(),
        records: collector.records,
        samples: collector.samples,
        final_utilization,
        busy_at_horizon,
    })
}

fn completion(p: PendingCompletion) -> EventKind {
    EventKind::Completion {
        server_id: p.server_id,
        task_id: p.task_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: u64, at: f64, size: f64) -> Task {
        Task::new(id, at, size)
    }

    #[test]
    fn push_single_event() {
        let mut q = EventQueue::new();
        q.push(5.0, EventKind::EndOfHorizon).unwrap();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn pops_in_time_order() {
        let mut q = EventQueue::new();
        q.push(3.0, EventKind::EndOfHorizon).unwrap();
        q.push(1.0, EventKind::EndOfHorizon).unwrap();
        assert_eq!(q.pop_next().unwrap().time, 1.0);
        assert_eq!(q.pop_next().unwrap().time, 3.0);
        assert!(q.pop_next().is_none());
    }

    #[test]
    fn ties_break_by_insertion_sequence() {
        let mut q = EventQueue::new();
        for _ in 0..7 {
            q.push(0.0, EventKind::EndOfHorizon).unwrap();
        }
        for _ in 0..7 {
            q.pop_next();
        }
        let a = q.push(5.0, EventKind::EndOfHorizon).unwrap();
        let b = q.push(5.0, EventKind::EndOfHorizon).unwrap();
        assert_eq!((a, b), (7, 8));
        assert_eq!(q.pop_next().unwrap().seq, 7);
        assert_eq!(q.pop_next().unwrap().seq, 8);
    }

    #[test]
    fn pop_sequence_and_empty() {
        let mut q = EventQueue::new();
        assert!(q.pop_next().is_none());
        q.push(9.0, EventKind::EndOfHorizon).unwrap();
        q.push(2.0, EventKind::EndOfHorizon).unwrap();
        assert_eq!(q.pop_next().unwrap().time, 2.0);
        assert_eq!(q.pop_next().unwrap().time, 9.0);
    }

    #[test]
    fn rejects_past_and_non_finite_events() {
        let mut q = EventQueue::new();
        q.push(4.0, EventKind::EndOfHorizon).unwrap();
        q.pop_next();
        assert!(matches!(
            q.push(3.0, EventKind::EndOfHorizon),
            Err(Error::EventInPast { .. })
        ));
        assert!(q.push(f64::NAN, EventKind::EndOfHorizon).is_err());
        assert!(q.push(4.0, EventKind::EndOfHorizon).is_ok());
    }

    #[test]
    fn assign_to_idle_server_schedules_completion() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 2.0, 1)]).unwrap();
        let done = c.assign_task(task(0, 10.0, 4.0), 0, 10.0).unwrap().unwrap();
        assert_eq!(done.time, 12.0);
    }

    #[test]
    fn assign_to_busy_server_queues() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 1.0, 1)]).unwrap();
        c.assign_task(task(0, 0.0, 1.0), 0, 0.0).unwrap();
        assert_eq!(c.snapshot(0.0).queue_length[0], 0);
        assert!(c.assign_task(task(1, 0.0, 1.0), 0, 0.0).unwrap().is_none());
        assert_eq!(c.snapshot(0.0).queue_length[0], 1);
    }

    #[test]
    fn second_slot_starts_immediately() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 1.0, 2)]).unwrap();
        assert!(c.assign_task(task(0, 0.0, 1.0), 0, 0.0).unwrap().is_some());
        assert!(c.assign_task(task(1, 0.0, 1.0), 0, 0.0).unwrap().is_some());
        assert!(c.assign_task(task(2, 0.0, 1.0), 0, 0.0).unwrap().is_none());
    }

    #[test]
    fn unknown_server_is_rejected() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 1.0, 1)]).unwrap();
        assert!(matches!(
            c.assign_task(task(0, 0.0, 1.0), 3, 0.0),
            Err(Error::UnknownServer { server_id: 3, .. })
        ));
    }

    #[test]
    fn completion_record_fields() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 2.0, 1)]).unwrap();
        c.assign_task(task(0, 9.0, 2.0), 0, 9.0).unwrap();
        // Arrives while task 0 still holds the only slot.
        c.assign_task(task(1, 10.0, 4.0), 0, 10.0).unwrap();
        let (rec0, next) = c.complete_task(0, 0, 10.0).unwrap();
        assert_eq!(rec0.response_time, 1.0);
        let next = next.unwrap();
        assert_eq!((next.task_id, next.time), (1, 12.0));
        let (rec1, none) = c.complete_task(0, 1, 12.0).unwrap();
        assert!(none.is_none());
        assert_eq!(rec1.start_time, 10.0);
        assert_eq!(rec1.response_time, 2.0);
    }

    #[test]
    fn completion_after_waiting() {
        // arrival=10, started=11, size=4, speed=2 -> completion=13, response=3
        let mut c = Cluster::new(&[ServerSpec::new(0, 2.0, 1)]).unwrap();
        c.assign_task(task(0, 9.0, 4.0), 0, 9.0).unwrap(); // ends at 11
        c.assign_task(task(1, 10.0, 4.0), 0, 10.0).unwrap();
        let (_, next) = c.complete_task(0, 0, 11.0).unwrap();
        assert_eq!(next.unwrap().time, 13.0);
        let (rec, _) = c.complete_task(0, 1, 13.0).unwrap();
        assert_eq!(rec.arrival_time, 10.0);
        assert_eq!(rec.start_time, 11.0);
        assert_eq!(rec.completion_time, 13.0);
        assert_eq!(rec.response_time, 3.0);
    }

    #[test]
    fn completing_unknown_task_is_invariant_error() {
        let mut c = Cluster::new(&[ServerSpec::new(0, 1.0, 1)]).unwrap();
        assert!(matches!(
            c.complete_task(0, 5, 1.0),
            Err(Error::Invariant(_))
        ));
        c.assign_task(task(0, 0.0, 1.0), 0, 0.0).unwrap();
        assert!(matches!(
            c.complete_task(0, 0, 0.5),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn snapshot_utilization() {
        let mut c =
            Cluster::new(&[ServerSpec::new(0, 1.0, 4), ServerSpec::new(1, 1.0, 1)]).unwrap();
        let idle = c.snapshot(0.0);
        assert_eq!(idle.instant_utilization, vec![0.0, 0.0]);
        assert_eq!(idle.system_load, 0.0);
        c.assign_task(task(0, 0.0, 1.0), 0, 0.0).unwrap();
        c.assign_task(task(1, 0.0, 1.0), 0, 0.0).unwrap();
        assert_eq!(c.snapshot(0.0).instant_utilization[0], 0.5);

        let mut c =
            Cluster::new(&[ServerSpec::new(0, 1.0, 1), ServerSpec::new(1, 1.0, 1)]).unwrap();
        c.assign_task(task(0, 0.0, 1.0), 1, 0.0).unwrap();
        let s = c.snapshot(0.0);
        assert_eq!(s.instant_utilization, vec![0.0, 1.0]);
        assert_eq!(s.system_load, 0.5);
        assert_eq!(s.active_tasks, 1);
    }

    #[test]
    fn cluster_validation() {
        assert!(Cluster::new(&[]).is_err());
        assert!(Cluster::new(&[ServerSpec::new(1, 1.0, 1)]).is_err());
        assert!(Cluster::new(&[ServerSpec::new(0, 0.0, 1)]).is_err());
        assert!(Cluster::new(&[ServerSpec::new(0, 1.0, 0)]).is_err());
        assert!(Cluster::new(&[ServerSpec::new(0, 1.0, 1).with_weight(-1.0)]).is_err());
    }
}
