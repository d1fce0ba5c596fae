//! Monotonic prefix consistency checking against a serial-replay oracle.
//!
//! The oracle replays log records one at a time, in sequence order, with its
//! own single-threaded data structures — deliberately independent of the
//! concurrent store the replay protocols write to. Every state a backup
//! exposes must equal the oracle's state at some transaction boundary, and
//! the boundaries a session observes must never move backwards.

use std::collections::BTreeMap;
use std::fmt;

use crate::log::{LogRecord, LogSegment};
use crate::types::{OpKind, RowKey, Seq};

/// Serial-replay reference: per-row version lists plus the transaction
/// boundary index, built in one pass over the log.
pub struct PrefixOracle {
    rows: BTreeMap<RowKey, Vec<(Seq, Option<Vec<u8>>)>>,
    /// Sequence numbers of `last_in_txn` records, ascending.
    boundaries: Vec<Seq>,
    total: Seq,
}

impl PrefixOracle {
    pub fn from_segments(segments: &[LogSegment]) -> Self {
        Self::from_records(segments.iter().flat_map(|s| s.records.iter()))
    }

    pub fn from_records<'a>(records: impl Iterator<Item = &'a LogRecord>) -> Self {
        let mut rows: BTreeMap<RowKey, Vec<(Seq, Option<Vec<u8>>)>> = BTreeMap::new();
        let mut boundaries = Vec::new();
        let mut total = 0;
        for rec in records {
            debug_assert!(rec.seq == total + 1, "log has a gap at seq {}", rec.seq);
            total = rec.seq;
            let payload = match rec.op {
                OpKind::Delete => None,
                _ => Some(rec.value.clone()),
            };
            rows.entry(rec.key).or_default().push((rec.seq, payload));
            if rec.last_in_txn {
                boundaries.push(rec.seq);
            }
        }
        Self { rows, boundaries, total }
    }

    pub fn total_records(&self) -> Seq {
        self.total
    }

    pub fn boundaries(&self) -> &[Seq] {
        &self.boundaries
    }

    /// The largest transaction boundary at or below `s` (0 if none).
    pub fn boundary_at_or_below(&self, s: Seq) -> Seq {
        match self.boundaries.binary_search(&s) {
            Ok(i) => self.boundaries[i],
            Err(0) => 0,
            Err(i) => self.boundaries[i - 1],
        }
    }

    /// 0 (the empty prefix) and every `last_in_txn` seq are boundaries.
    pub fn is_boundary(&self, s: Seq) -> bool {
        s == 0 || self.boundaries.binary_search(&s).is_ok()
    }

    /// Value of `key` after serially replaying the prefix `1..=at_seq`.
    pub fn value_at(&self, key: RowKey, at_seq: Seq) -> Option<Vec<u8>> {
        let versions = self.rows.get(&key)?;
        let idx = versions.partition_point(|(s, _)| *s <= at_seq);
        if idx == 0 {
            None
        } else {
            versions[idx - 1].1.clone()
        }
    }

    /// Full state after replaying the prefix `1..=at_seq`, deletes absent.
    pub fn state_at(&self, at_seq: Seq) -> BTreeMap<RowKey, Vec<u8>> {
        let mut out = BTreeMap::new();
        for (key, versions) in &self.rows {
            let idx = versions.partition_point(|(s, _)| *s <= at_seq);
            if idx > 0 {
                if let Some(p) = &versions[idx - 1].1 {
                    out.insert(*key, p.clone());
                }
            }
        }
        out
    }

    pub fn final_state(&self) -> BTreeMap<RowKey, Vec<u8>> {
        self.state_at(self.total)
    }

    /// Canonical 64-bit digest of the state at a boundary. Deterministic
    /// across replays of the same log.
    pub fn digest_at(&self, at_seq: Seq) -> u64 {
        digest_state(&self.state_at(at_seq))
    }
}

/// FNV-1a over the canonical (sorted) row/payload encoding.
pub fn digest_state(state: &BTreeMap<RowKey, Vec<u8>>) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for (key, payload) in state {
        eat(&key.table.to_le_bytes());
        eat(&key.row.to_le_bytes());
        eat(&(payload.len() as u64).to_le_bytes());
        eat(payload);
    }
    h
}

pub fn digest_value(value: &Option<Vec<u8>>) -> u64 {
    let mut map = BTreeMap::new();
    if let Some(v) = value {
        map.insert(RowKey::new(0, 0), v.clone());
    }
    digest_state(&map)
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// What one read-only transaction saw: the snapshot cursor it sampled and the
/// values it read.
#[derive(Debug, Clone)]
pub struct Observation {
    pub session_id: u32,
    pub sampled_c: Seq,
    pub reads: Vec<(RowKey, Option<Vec<u8>>)>,
    pub at_ns: u64,
}

/// Per-session observation buffer. Owned by the reading thread, so appends
/// need no synchronization; buffers are collected when sessions join.
#[derive(Debug)]
pub struct SessionRecorder {
    pub session_id: u32,
    observations: Vec<Observation>,
}

impl SessionRecorder {
    pub fn new(session_id: u32) -> Self {
        Self { session_id, observations: Vec::new() }
    }

    pub fn record(&mut self, sampled_c: Seq, reads: Vec<(RowKey, Option<Vec<u8>>)>, at_ns: u64) {
        self.observations.push(Observation { session_id: self.session_id, sampled_c, reads, at_ns });
    }

    pub fn into_observations(self) -> Vec<Observation> {
        self.observations
    }
}

// ---------------------------------------------------------------------------
// Violations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The exposed prefix was not a transaction boundary: some transaction's
    /// writes were visible only in part.
    NonBoundaryPrefix { session_id: u32, sampled_c: Seq },
    /// A read did not match the serial prefix state at the sampled cursor.
    ValueMismatch {
        session_id: u32,
        sampled_c: Seq,
        key: RowKey,
        expected: Option<Vec<u8>>,
        got: Option<Vec<u8>>,
    },
    /// A session observed the cursor moving backwards.
    NonMonotonicSession { session_id: u32, prev_c: Seq, next_c: Seq },
}

impl Violation {
    /// Structured one-line rendering:
    /// `violation run=<id> session=<s> kind=<k> row=<t:r> expected=<digest> got=<digest>`.
    pub fn render(&self, run_id: &str) -> String {
        match self {
            Violation::NonBoundaryPrefix { session_id, sampled_c } => format!(
                "violation run={run_id} session={session_id} kind=non-boundary-prefix c={sampled_c}"
            ),
            Violation::ValueMismatch { session_id, sampled_c, key, expected, got } => format!(
                "violation run={run_id} session={session_id} kind=value-mismatch c={sampled_c} row={key} expected={:016x} got={:016x}",
                digest_value(expected),
                digest_value(got),
            ),
            Violation::NonMonotonicSession { session_id, prev_c, next_c } => format!(
                "violation run={run_id} session={session_id} kind=non-monotonic prev_c={prev_c} next_c={next_c}"
            ),
        }
    }
}

/// Checks one observation against the oracle: the sampled prefix must be a
/// transaction boundary and every read must equal the serial prefix state.
pub fn check_state(obs: &Observation, oracle: &PrefixOracle) -> Vec<Violation> {
    let mut out = Vec::new();
    if !oracle.is_boundary(obs.sampled_c) {
        out.push(Violation::NonBoundaryPrefix {
            session_id: obs.session_id,
            sampled_c: obs.sampled_c,
        });
        return out;
    }
    for (key, got) in &obs.reads {
        let expected = oracle.value_at(*key, obs.sampled_c);
        if expected != *got {
            out.push(Violation::ValueMismatch {
                session_id: obs.session_id,
                sampled_c: obs.sampled_c,
                key: *key,
                expected,
                got: got.clone(),
            });
        }
    }
    out
}

/// Checks that each session's sampled prefixes never shrink. Observations
/// must be in session order (the order the session issued them).
pub fn check_monotonic(sessions: &[Vec<Observation>]) -> Vec<Violation> {
    let mut out = Vec::new();
    for session in sessions {
        for pair in session.windows(2) {
            if pair[1].sampled_c < pair[0].sampled_c {
                out.push(Violation::NonMonotonicSession {
                    session_id: pair[1].session_id,
                    prev_c: pair[0].sampled_c,
                    next_c: pair[1].sampled_c,
                });
            }
        }
    }
    out
}

/// A divergence between the backup's final state and the oracle's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiff {
    pub key: RowKey,
    pub expected: Option<Vec<u8>>,
    pub got: Option<Vec<u8>>,
}

impl fmt::Display for RowDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row={} expected={:016x} got={:016x}",
            self.key,
            digest_value(&self.expected),
            digest_value(&self.got)
        )
    }
}

/// Compares the backup's final store against the oracle's full-log state.
pub fn check_final_convergence(store: &crate::mvstore::Store, oracle: &PrefixOracle) -> Vec<RowDiff> {
    let got = store.final_state();
    let expected = oracle.final_state();
    let mut diffs = Vec::new();
    for (key, want) in &expected {
        match got.get(key) {
            Some(have) if have == want => {}
            have => diffs.push(RowDiff {
                key: *key,
                expected: Some(want.clone()),
                got: have.cloned(),
            }),
        }
    }
    for (key, have) in &got {
        if !expected.contains_key(key) {
            diffs.push(RowDiff { key: *key, expected: None, got: Some(have.clone()) });
        }
    }
    diffs
}
