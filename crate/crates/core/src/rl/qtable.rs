use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::write_with;

use super::{ActionId, DiscreteState};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QEntry {
    pub value: f64,
    pub visits: u64,
}

/// Sparse action-value table. Rows are materialized on first update; every
/// absent entry reads as exactly 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<S: Hash + Eq> {
    n_actions: usize,
    rows: HashMap<S, Vec<QEntry>>,
}

impl<S: Hash + Eq + Clone> QTable<S> {
    pub fn new(n_actions: usize) -> Self {
        assert!(n_actions > 0, "a Q-table needs at least one action");
        QTable {
            n_actions,
            rows: HashMap::new(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of materialized states.
    pub fn states(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, state: &S) -> Option<&[QEntry]> {
        self.rows.get(state).map(Vec::as_slice)
    }

    pub fn get(&self, state: &S, action: ActionId) -> f64 {
        self.rows
            .get(state)
            .and_then(|r| r.get(action.0))
            .map_or(0.0, |e| e.value)
    }

    pub fn visits(&self, state: &S, action: ActionId) -> u64 {
        self.rows
            .get(state)
            .and_then(|r| r.get(action.0))
            .map_or(0, |e| e.visits)
    }

    pub fn max_value(&self, state: &S) -> f64 {
        match self.rows.get(state) {
            Some(row) => row
                .iter()
                .map(|e| e.value)
                .fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        }
    }

    /// Argmax over actions, lowest index on ties.
    pub fn greedy_action(&self, state: &S) -> ActionId {
        let Some(row) = self.rows.get(state) else {
            return ActionId(0);
        };
        let mut best = 0;
        for (i, e) in row.iter().enumerate().skip(1) {
            if e.value > row[best].value {
                best = i;
            }
        }
        ActionId(best)
    }

    pub fn entry_mut(&mut self, state: &S, action: ActionId) -> &mut QEntry {
        assert!(
            action.0 < self.n_actions,
            "action {} out of range",
            action.0
        );
        let n = self.n_actions;
        let row = self
            .rows
            .entry(state.clone())
            .or_insert_with(|| vec![QEntry::default(); n]);
        &mut row[action.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&S, &[QEntry])> {
        self.rows.iter().map(|(s, r)| (s, r.as_slice()))
    }
}

pub const QTABLE_VERSION: u32 = 1;
const COLUMNS: &str = "state,action,q_value,visit_count";

fn encode_state(s: &DiscreteState) -> String {
    let utils: Vec<String> = s.util_bins.iter().map(u8::to_string).collect();
    format!("{}:{}:{}", utils.join("."), s.active_tasks_bin, s.load_bin)
}

fn decode_state(field: &str, servers: usize) -> std::result::Result<DiscreteState, String> {
    let parts: Vec<&str> = field.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("state `{field}` must have 3 `:`-separated parts"));
    }
    let util_bins = parts[0]
        .split('.')
        .map(|b| b.parse::<u8>().map_err(|e| format!("util bin `{b}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if util_bins.len() != servers {
        return Err(format!(
            "state has {} util bins, expected {servers}",
            util_bins.len()
        ));
    }
    Ok(DiscreteState {
        util_bins,
        active_tasks_bin: parts[1].parse().map_err(|e| format!("active bin: {e}"))?,
        load_bin: parts[2].parse().map_err(|e| format!("load bin: {e}"))?,
    })
}

/// Persists a Q-table as a versioned CSV.
///
/// ```text
/// # rl-balance qtable version=1 servers=<N>
/// state,action,q_value,visit_count
/// <u_0>.<u_1>...<u_N-1>:<active_tasks_bin>:<load_bin>,<action>,<q_value>,<visit_count>
/// ```
///
/// One row per entry of every materialized state, sorted by state then
/// action. `q_value` is written in shortest round-trip form so loading
/// reproduces the table bit for bit.
pub fn write_qtable(q: &QTable<DiscreteState>, path: &Path) -> Result<()> {
    let mut rows: Vec<(&DiscreteState, &[QEntry])> = q.iter().collect();
    rows.sort_unstable_by(|a, b| a.0.cmp(b.0));
    write_with(path, |w| {
        writeln!(
            w,
            "# rl-balance qtable version={QTABLE_VERSION} servers={}",
            q.n_actions()
        )?;
        writeln!(w, "{COLUMNS}")?;
        for (state, row) in rows {
            let key = encode_state(state);
            for (a, e) in row.iter().enumerate() {
                writeln!(w, "{key},{a},{},{}", e.value, e.visits)?;
            }
        }
        Ok(())
    })
}

pub fn read_qtable(path: &Path) -> Result<QTable<DiscreteState>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        what: "qtable",
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut version = None;
    let mut servers = None;
    for token in header.trim_start_matches('#').split_whitespace() {
        if let Some(v) = token.strip_prefix("version=") {
            version = v.parse::<u32>().ok();
        } else if let Some(v) = token.strip_prefix("servers=") {
            servers = v.parse::<usize>().ok();
        }
    }
    match version {
        Some(QTABLE_VERSION) => {}
        Some(v) => return Err(err(1, format!("unsupported qtable version {v}"))),
        None => return Err(err(1, "missing `version=` in header".into())),
    }
    let servers = servers
        .filter(|&n| n > 0)
        .ok_or_else(|| err(1, "missing `servers=` in header".into()))?;
    if lines.next().map(str::trim) != Some(COLUMNS) {
        return Err(err(2, format!("expected column header `{COLUMNS}`")));
    }
    let mut q = QTable::new(servers);
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(
                lineno,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let state = decode_state(fields[0], servers).map_err(|m| err(lineno, m))?;
        let action: usize = fields[1]
            .parse()
            .map_err(|e| err(lineno, format!("action: {e}")))?;
        if action >= servers {
            return Err(err(lineno, format!("action {action} out of range")));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|e| err(lineno, format!("q_value: {e}")))?;
        if !value.is_finite() {
            return Err(err(lineno, "q_value must be finite".into()));
        }
        let visits: u64 = fields[3]
            .parse()
            .map_err(|e| err(lineno, format!("visit_count: {e}")))?;
        *q.entry_mut(&state, ActionId(action)) = QEntry { value, visits };
    }
    Ok(q)
}
