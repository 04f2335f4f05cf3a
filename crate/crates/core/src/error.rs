use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (cluster, workload, agent).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A policy or caller referenced a server outside `0..N`.
    #[error("unknown server id {server_id} (cluster has {servers} servers)")]
    UnknownServer { server_id: usize, servers: usize },

    /// Internal engine invariant broken; always a bug.
    #[error("simulation invariant violated: {0}")]
    Invariant(String),

    #[error("event at t={event_time} scheduled before current time t={now}")]
    EventInPast { event_time: f64, now: f64 },

    #[error("task trace is not sorted by arrival time at task id {task_id}")]
    UnsortedTrace { task_id: u64 },

    #[error("duplicate completion record for task id {0}")]
    DuplicateRecord(u64),

    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),

    #[error("empty task trace")]
    EmptyTrace,

    #[error("unknown policy `{name}` (valid: {valid})")]
    UnknownPolicy { name: String, valid: String },

    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
