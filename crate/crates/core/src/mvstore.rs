//! In-memory multi-version row store shared by the primary and the backup.
//!
//! Rows map to version chains ordered by write sequence number, so "the
//! current snapshot" is simply "everything visible at sequence number c".
//! Installs to distinct rows may run concurrently; installs to one row are
//! serialized by the callers' ordering rules, and readers at a fixed sequence
//! number are unaffected by concurrent installs of newer versions.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use dashmap::DashMap;
use thiserror::Error;

use crate::types::{RowKey, Seq};

/// One version of a row. `payload == None` is a delete tombstone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowVersion {
    pub write_seq: Seq,
    pub payload: Option<Vec<u8>>,
}

/// Versions of one row. Stored oldest-first so installs are appends; the
/// logical chain (newest-first, strictly descending `write_seq`) is exposed
/// by [`VersionChain::iter_newest_first`].
#[derive(Debug, Default)]
pub struct VersionChain {
    versions: Vec<RowVersion>,
}

impl VersionChain {
    pub fn head_seq(&self) -> Seq {
        self.versions.last().map_or(0, |v| v.write_seq)
    }

    pub fn iter_newest_first(&self) -> impl Iterator<Item = &RowVersion> {
        self.versions.iter().rev()
    }

    fn visible_at(&self, at_seq: Seq) -> Option<&RowVersion> {
        let idx = self.versions.partition_point(|v| v.write_seq <= at_seq);
        if idx == 0 {
            None
        } else {
            Some(&self.versions[idx - 1])
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("ordering violation on row {key}: install at seq {attempted} but chain head is {head}")]
    OrderingViolation { key: RowKey, head: Seq, attempted: Seq },
    #[error("merge too early: write at seq {pending} within (c={c}, n={n}] is still pending")]
    MergeTooEarly { c: Seq, n: Seq, pending: Seq },
}

/// The database: tables of rows, each row a version chain.
#[derive(Debug, Default)]
pub struct Store {
    rows: DashMap<RowKey, VersionChain>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs a new version as the chain head. `payload == None` installs a
    /// delete tombstone. Fails if `write_seq` does not exceed the current
    /// head, which signals a scheduler bug rather than a user error.
    pub fn install(
        &self,
        key: RowKey,
        write_seq: Seq,
        payload: Option<Vec<u8>>,
    ) -> Result<(), StoreError> {
        let mut chain = self.rows.entry(key).or_default();
        let head = chain.head_seq();
        if write_seq <= head {
            return Err(StoreError::OrderingViolation { key, head, attempted: write_seq });
        }
        chain.versions.push(RowVersion { write_seq, payload });
        Ok(())
    }

    /// Returns the payload of the newest version with `write_seq <= at_seq`,
    /// or `None` if the row is absent at that point or deleted.
    pub fn read_at(&self, key: RowKey, at_seq: Seq) -> Option<Vec<u8>> {
        self.rows
            .get(&key)
            .and_then(|chain| chain.visible_at(at_seq).and_then(|v| v.payload.clone()))
    }

    /// Chain head's write sequence, 0 for an absent row.
    pub fn head_seq(&self, key: RowKey) -> Seq {
        self.rows.get(&key).map_or(0, |chain| chain.head_seq())
    }

    /// Materializes the visible state at `at_seq` as a row → payload map.
    /// Deleted and never-written rows are absent.
    pub fn state_at(&self, at_seq: Seq) -> BTreeMap<RowKey, Vec<u8>> {
        let mut out = BTreeMap::new();
        for entry in self.rows.iter() {
            if let Some(v) = entry.value().visible_at(at_seq) {
                if let Some(p) = &v.payload {
                    out.insert(*entry.key(), p.clone());
                }
            }
        }
        out
    }

    pub fn final_state(&self) -> BTreeMap<RowKey, Vec<u8>> {
        self.state_at(Seq::MAX)
    }

    /// Calls `f` for every row chain. Used by invariant checks.
    pub fn for_each_chain(&self, mut f: impl FnMut(RowKey, &VersionChain)) {
        for entry in self.rows.iter() {
            f(*entry.key(), entry.value());
        }
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
}

// ---------------------------------------------------------------------------
// Install tracking
// ---------------------------------------------------------------------------

/// Tracks which log sequence numbers have been installed, exactly once each.
///
/// Backing bitmap grows on demand; `contiguous_prefix` gives the largest `s`
/// such that every seq in `1..=s` is installed, advancing an internal cache
/// so repeated calls are amortized O(1) per installed record.
#[derive(Debug, Default)]
pub struct InstallTracker {
    words: RwLock<Vec<AtomicU64>>,
    contiguous: AtomicU64,
    max_marked: AtomicU64,
    total: AtomicU64,
}

impl InstallTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(max_seq: Seq) -> Self {
        let t = Self::default();
        t.grow_to(max_seq);
        t
    }

    fn grow_to(&self, seq: Seq) {
        let need = (seq / 64 + 1) as usize;
        let mut words = self.words.write().unwrap();
        while words.len() < need {
            words.push(AtomicU64::new(0));
        }
    }

    /// Marks `seq` installed. Panics if it was already marked: every log
    /// record must execute exactly once.
    pub fn mark(&self, seq: Seq) {
        assert!(seq >= 1, "seq numbering is 1-based");
        let word = (seq / 64) as usize;
        let bit = 1u64 << (seq % 64);
        loop {
            {
                let words = self.words.read().unwrap();
                if let Some(w) = words.get(word) {
                    let prev = w.fetch_or(bit, Ordering::AcqRel);
                    assert_eq!(prev & bit, 0, "seq {seq} installed twice");
                    break;
                }
            }
            self.grow_to(seq);
        }
        self.max_marked.fetch_max(seq, Ordering::AcqRel);
        self.total.fetch_add(1, Ordering::AcqRel);
    }

    pub fn is_marked(&self, seq: Seq) -> bool {
        let words = self.words.read().unwrap();
        words
            .get((seq / 64) as usize)
            .map_or(false, |w| w.load(Ordering::Acquire) & (1 << (seq % 64)) != 0)
    }

    /// Largest `s` with all of `1..=s` installed.
    pub fn contiguous_prefix(&self) -> Seq {
        let mut cur = self.contiguous.load(Ordering::Acquire);
        let words = self.words.read().unwrap();
        loop {
            let next = cur + 1;
            let word = (next / 64) as usize;
            let bit = 1u64 << (next % 64);
            match words.get(word) {
                Some(w) if w.load(Ordering::Acquire) & bit != 0 => cur = next,
                _ => break,
            }
        }
        drop(words);
        self.contiguous.fetch_max(cur, Ordering::AcqRel);
        cur
    }

    pub fn max_marked(&self) -> Seq {
        self.max_marked.load(Ordering::Acquire)
    }

    pub fn total_marked(&self) -> u64 {
        self.total.load(Ordering::Acquire)
    }
}

// ---------------------------------------------------------------------------
// Snapshot cursor
// ---------------------------------------------------------------------------

/// The pair of sequence numbers delimiting the current, next, and future
/// snapshots: the current snapshot is everything at or below `c`; writes in
/// `(c, n]` form the next snapshot; writes beyond `n` belong to the future.
#[derive(Debug, Default)]
pub struct SnapshotCursor {
    c: AtomicU64,
    n: AtomicU64,
}

impl SnapshotCursor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn c(&self) -> Seq {
        self.c.load(Ordering::Acquire)
    }

    pub fn n(&self) -> Seq {
        self.n.load(Ordering::Acquire)
    }

    /// Stages the next snapshot's end. Callers must pass a transaction
    /// boundary sequence number.
    pub fn stage_n(&self, n: Seq) {
        let old = self.n.swap(n, Ordering::AcqRel);
        debug_assert!(n >= old, "n moved backwards: {n} < {old}");
    }

    /// Publishes `n` as the new current snapshot. Both cursors move together;
    /// the new future snapshot exists implicitly.
    pub fn publish(&self, n: Seq) {
        let old_c = self.c.load(Ordering::Acquire);
        assert!(n >= old_c, "c moved backwards: {n} < {old_c}");
        self.n.fetch_max(n, Ordering::AcqRel);
        self.c.store(n, Ordering::Release);
    }
}

/// Merges the current and next snapshots by advancing `c` to `n`, provided
/// every write in `(c, n]` has been installed. No data moves: versions carry
/// their sequence numbers, so the merge is a cursor update.
pub fn merge_snapshots(cursor: &SnapshotCursor, tracker: &InstallTracker) -> Result<(), StoreError> {
    let c = cursor.c();
    let n = cursor.n();
    if n <= c {
        return Ok(());
    }
    let ready = tracker.contiguous_prefix();
    if ready < n {
        // Name the first pending seq in the window for the error.
        let mut pending = ready + 1;
        while pending <= n && tracker.is_marked(pending) {
            pending += 1;
        }
        return Err(StoreError::MergeTooEarly { c, n, pending });
    }
    cursor.publish(n);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(row: u64) -> RowKey {
        RowKey::new(0, row)
    }

    fn val(v: u64) -> Option<Vec<u8>> {
        Some(v.to_le_bytes().to_vec())
    }

    #[test]
    fn install_orders_chain_head() {
        let s = Store::new();
        s.install(key(1), 1, val(10)).unwrap();
        s.install(key(1), 2, val(20)).unwrap();
        assert_eq!(s.head_seq(key(1)), 2);
        assert_eq!(s.read_at(key(1), Seq::MAX), val(20).map(|v| v));
    }

    #[test]
    fn non_monotonic_install_rejected() {
        let s = Store::new();
        s.install(key(1), 2, val(1)).unwrap();
        let err = s.install(key(1), 1, val(2)).unwrap_err();
        assert_eq!(err, StoreError::OrderingViolation { key: key(1), head: 2, attempted: 1 });
        // Equal seq is also a violation: at most one version per (row, seq).
        let err = s.install(key(1), 2, val(3)).unwrap_err();
        assert!(matches!(err, StoreError::OrderingViolation { .. }));
    }

    #[test]
    fn tombstone_reads_as_not_found() {
        let s = Store::new();
        s.install(key(1), 1, val(10)).unwrap();
        s.install(key(1), 3, None).unwrap();
        assert_eq!(s.read_at(key(1), 2), val(10));
        assert_eq!(s.read_at(key(1), 3), None);
        assert_eq!(s.read_at(key(1), Seq::MAX), None);
        assert!(s.state_at(Seq::MAX).is_empty());
    }

    #[test]
    fn read_at_picks_newest_at_or_below() {
        let s = Store::new();
        s.install(key(1), 2, val(10)).unwrap();
        s.install(key(1), 4, val(20)).unwrap();
        assert_eq!(s.read_at(key(1), 3), val(10));
        assert_eq!(s.read_at(key(1), 1), None);
        assert_eq!(s.read_at(key(1), 4), val(20));
        assert_eq!(s.read_at(key(9), 10), None);
    }

    #[test]
    fn head_seq_for_absent_and_present_rows() {
        let s = Store::new();
        assert_eq!(s.head_seq(key(7)), 0);
        s.install(key(7), 7, val(1)).unwrap();
        assert_eq!(s.head_seq(key(7)), 7);
        s.install(key(7), 9, val(2)).unwrap();
        assert_eq!(s.head_seq(key(7)), 9);
    }

    #[test]
    fn tracker_exactly_once_and_prefix() {
        let t = InstallTracker::new();
        t.mark(2);
        assert_eq!(t.contiguous_prefix(), 0);
        t.mark(1);
        assert_eq!(t.contiguous_prefix(), 2);
        t.mark(3);
        assert_eq!(t.contiguous_prefix(), 3);
        assert_eq!(t.max_marked(), 3);
        assert_eq!(t.total_marked(), 3);
    }

    #[test]
    #[should_panic(expected = "installed twice")]
    fn tracker_panics_on_double_install() {
        let t = InstallTracker::new();
        t.mark(5);
        t.mark(5);
    }

    #[test]
    fn merge_advances_when_window_complete() {
        let t = InstallTracker::new();
        let cur = SnapshotCursor::new();
        for s in 1..=5 {
            t.mark(s);
        }
        cur.stage_n(5);
        merge_snapshots(&cur, &t).unwrap();
        assert_eq!(cur.c(), 5);
    }

    #[test]
    fn merge_too_early_names_pending_seq() {
        let t = InstallTracker::new();
        let cur = SnapshotCursor::new();
        for s in [1u64, 2, 3, 5] {
            t.mark(s);
        }
        cur.stage_n(5);
        let err = merge_snapshots(&cur, &t).unwrap_err();
        assert_eq!(err, StoreError::MergeTooEarly { c: 0, n: 5, pending: 4 });
        assert_eq!(cur.c(), 0);
        t.mark(4);
        merge_snapshots(&cur, &t).unwrap();
        assert_eq!(cur.c(), 5);
    }

    #[test]
    fn chains_strictly_descending_after_concurrent_installs() {
        let s = std::sync::Arc::new(Store::new());
        std::thread::scope(|scope| {
            for t in 0..4u64 {
                let s = s.clone();
                scope.spawn(move || {
                    for i in 0..100u64 {
                        // Distinct rows per thread: concurrent installs to
                        // distinct rows must be safe.
                        s.install(key(t), i * 4 + t + 1, val(i)).unwrap();
                    }
                });
            }
        });
        s.for_each_chain(|_, chain| {
            let seqs: Vec<_> = chain.iter_newest_first().map(|v| v.write_seq).collect();
            assert!(seqs.windows(2).all(|w| w[0] > w[1]));
        });
    }
}
