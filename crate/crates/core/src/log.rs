//! The totally ordered write log the primary emits and the backup consumes.
//!
//! Committed transactions append their writes either to per-thread logs that
//! are later [`coalesce`]d into one total order, or directly to a shared
//! [`LogSink`] in commit order. Either way the result is a sequence of
//! [`LogSegment`]s: fixed-capacity frames of [`LogRecord`]s in which a
//! transaction's records never span a segment boundary, so a segment can be
//! handed to a replay worker as a self-contained unit.

use std::io::{self, Read, Write};
use std::sync::mpsc::Sender;
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::types::{OpKind, RowKey, Seq, TxnId};

/// Default segment capacity, in records.
pub const DEFAULT_SEGMENT_CAPACITY: usize = 4096;

/// One row write in the total order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    /// Position in the total order, 1-based and gap-free.
    pub seq: Seq,
    pub txn_id: TxnId,
    pub key: RowKey,
    pub op: OpKind,
    /// Full row payload; empty for deletes.
    pub value: Vec<u8>,
    /// Commit timestamp of the owning transaction. Strictly increasing
    /// across transactions in log order; shared by all records of one
    /// transaction.
    pub write_ts: u64,
    /// Sequence number of the immediately preceding write to the same row,
    /// 0 if this is the row's first write. Filled in by the scheduler's
    /// preprocessing pass.
    pub prev_seq: Seq,
    /// Marks the transaction's final write.
    pub last_in_txn: bool,
}

/// A frame of consecutive log records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogSegment {
    pub segment_index: u32,
    /// Target record count. A segment may exceed it only when a single
    /// oversized transaction occupies it alone.
    pub capacity: usize,
    /// Set once every record's `prev_seq` is final.
    pub preprocessed: bool,
    pub records: Vec<LogRecord>,
}

/// A buffered write awaiting commit, before it has a place in the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOp {
    pub key: RowKey,
    pub op: OpKind,
    pub value: Vec<u8>,
}

impl WriteOp {
    pub fn new(key: RowKey, op: OpKind, value: Vec<u8>) -> Self {
        Self { key, op, value }
    }
}

/// One committed transaction in a per-thread log.
#[derive(Debug, Clone)]
pub struct ThreadLogEntry {
    pub commit_ts: u64,
    pub txn_id: TxnId,
    pub writes: Vec<WriteOp>,
}

/// Per-thread commit log; appended to only by its owning primary thread.
#[derive(Debug, Clone, Default)]
pub struct ThreadLog {
    pub thread_id: u32,
    pub entries: Vec<ThreadLogEntry>,
}

impl ThreadLog {
    pub fn new(thread_id: u32) -> Self {
        Self { thread_id, entries: Vec::new() }
    }

    pub fn push(&mut self, commit_ts: u64, txn_id: TxnId, writes: Vec<WriteOp>) {
        if let Some(last) = self.entries.last() {
            assert!(
                commit_ts > last.commit_ts,
                "thread {} commit timestamps must increase: {} after {}",
                self.thread_id,
                commit_ts,
                last.commit_ts
            );
        }
        self.entries.push(ThreadLogEntry { commit_ts, txn_id, writes });
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoalesceError {
    #[error("duplicate commit timestamp {ts} across threads {a} and {b}: primary clock contract broken")]
    DuplicateCommitTs { ts: u64, a: u32, b: u32 },
}

/// Packs whole transactions into segments, assigning sequence numbers and
/// enforcing the no-span rule.
#[derive(Debug)]
pub struct SegmentAccumulator {
    capacity: usize,
    next_seq: Seq,
    next_index: u32,
    current: Vec<LogRecord>,
    sealed: Vec<LogSegment>,
}

impl SegmentAccumulator {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "segment capacity must be at least 1");
        Self { capacity, next_seq: 1, next_index: 0, current: Vec::new(), sealed: Vec::new() }
    }

    pub fn next_seq(&self) -> Seq {
        self.next_seq
    }

    /// Appends one committed transaction. Returns the (first, last) sequence
    /// numbers assigned to its records.
    pub fn push_txn(&mut self, txn_id: TxnId, write_ts: u64, writes: &[WriteOp]) -> (Seq, Seq) {
        assert!(!writes.is_empty(), "transactions log at least one write");
        // A transaction never spans segments: seal the current one if the
        // whole transaction does not fit in the remaining space.
        if !self.current.is_empty() && self.current.len() + writes.len() > self.capacity {
            self.seal_current();
        }
        let first = self.next_seq;
        for (i, w) in writes.iter().enumerate() {
            self.current.push(LogRecord {
                seq: self.next_seq,
                txn_id,
                key: w.key,
                op: w.op,
                value: w.value.clone(),
                write_ts,
                prev_seq: 0,
                last_in_txn: i + 1 == writes.len(),
            });
            self.next_seq += 1;
        }
        let last = self.next_seq - 1;
        if self.current.len() >= self.capacity {
            self.seal_current();
        }
        (first, last)
    }

    fn seal_current(&mut self) -> Option<&LogSegment> {
        if self.current.is_empty() {
            return None;
        }
        let records = std::mem::take(&mut self.current);
        self.sealed.push(LogSegment {
            segment_index: self.next_index,
            capacity: self.capacity,
            preprocessed: false,
            records,
        });
        self.next_index += 1;
        self.sealed.last()
    }

    /// Seals any partial segment. Always legal: appends happen per whole
    /// transaction, so the current segment ends at a transaction boundary.
    pub fn seal_partial(&mut self) {
        self.seal_current();
    }

    pub fn take_sealed(&mut self) -> Vec<LogSegment> {
        std::mem::take(&mut self.sealed)
    }

    pub fn finish(mut self) -> Vec<LogSegment> {
        self.seal_current();
        self.sealed
    }
}

/// Merges per-thread logs into one total order by commit timestamp.
///
/// Sequence numbers are assigned 1..N, transactions stay contiguous, and
/// `prev_seq` is left 0 for the scheduler to fill in later.
pub fn coalesce(
    thread_logs: &[ThreadLog],
    segment_capacity: usize,
) -> Result<Vec<LogSegment>, CoalesceError> {
    let mut entries: Vec<(u32, &ThreadLogEntry)> = Vec::new();
    for tl in thread_logs {
        debug_assert!(tl.entries.windows(2).all(|w| w[0].commit_ts < w[1].commit_ts));
        for e in &tl.entries {
            entries.push((tl.thread_id, e));
        }
    }
    entries.sort_by_key(|(_, e)| e.commit_ts);
    for pair in entries.windows(2) {
        if pair[0].1.commit_ts == pair[1].1.commit_ts {
            return Err(CoalesceError::DuplicateCommitTs {
                ts: pair[0].1.commit_ts,
                a: pair[0].0,
                b: pair[1].0,
            });
        }
    }
    let mut acc = SegmentAccumulator::new(segment_capacity);
    for (_, e) in entries {
        acc.push_txn(e.txn_id, e.commit_ts, &e.writes);
    }
    Ok(acc.finish())
}

/// Composes a per-thread local counter and the thread id into a commit
/// timestamp that is unique across threads and increasing within each thread.
pub fn compose_commit_ts(local_counter: u64, thread_id: u32) -> u64 {
    (local_counter << 8) | u64::from(thread_id & 0xff)
}

// ---------------------------------------------------------------------------
// Streaming sink
// ---------------------------------------------------------------------------

/// Timing and placement facts returned by a commit append.
#[derive(Debug, Clone, Copy)]
pub struct AppendInfo {
    pub write_ts: u64,
    pub first_seq: Seq,
    pub last_seq: Seq,
    /// Instant the append took effect, read while the sink lock (and the
    /// committing transaction's row locks) were still held.
    pub at: Instant,
}

struct SinkState {
    acc: SegmentAccumulator,
    next_ts: u64,
    last_activity: Instant,
    finished: bool,
}

/// Commit-ordered log producer shared by the primary's executor threads.
///
/// Appends happen under one lock, so the append order is the commit order and
/// `write_ts` is assigned from a single counter. Sealed segments are pushed to
/// the subscriber channel for live consumption by a backup scheduler.
pub struct LogSink {
    state: Mutex<SinkState>,
    tx: Sender<LogSegment>,
}

impl LogSink {
    pub fn new(segment_capacity: usize, tx: Sender<LogSegment>) -> Self {
        Self {
            state: Mutex::new(SinkState {
                acc: SegmentAccumulator::new(segment_capacity),
                next_ts: 1,
                last_activity: Instant::now(),
                finished: false,
            }),
            tx,
        }
    }

    /// Appends a committed transaction. Callers must still hold the
    /// transaction's row locks so conflicting commits append in lock order.
    pub fn append_txn(&self, txn_id: TxnId, writes: &[WriteOp]) -> AppendInfo {
        let mut st = self.state.lock().unwrap();
        assert!(!st.finished, "append after sink finished");
        let write_ts = st.next_ts;
        st.next_ts += 1;
        let (first_seq, last_seq) = st.acc.push_txn(txn_id, write_ts, writes);
        let at = Instant::now();
        st.last_activity = at;
        for seg in st.acc.take_sealed() {
            let _ = self.tx.send(seg);
        }
        AppendInfo { write_ts, first_seq, last_seq, at }
    }

    /// Seals the partial segment if nothing has been appended for `max_age`,
    /// so a slow write stream still reaches the backup promptly.
    pub fn flush_if_stale(&self, max_age: std::time::Duration) {
        let mut st = self.state.lock().unwrap();
        if st.finished || st.last_activity.elapsed() < max_age {
            return;
        }
        st.acc.seal_partial();
        st.last_activity = Instant::now();
        for seg in st.acc.take_sealed() {
            let _ = self.tx.send(seg);
        }
    }

    /// Seals the tail segment and closes the subscriber channel.
    pub fn finish(&self) {
        let mut st = self.state.lock().unwrap();
        if st.finished {
            return;
        }
        st.finished = true;
        st.acc.seal_partial();
        for seg in st.acc.take_sealed() {
            let _ = self.tx.send(seg);
        }
    }
}

// ---------------------------------------------------------------------------
// Record codec and segment-framed files
// ---------------------------------------------------------------------------

/// Fixed header: seq, txn_id, table_id, row_id, write_ts, prev_seq, op_kind,
/// last_in_txn, value_len — little-endian fixed-width integers.
pub const RECORD_HEADER_LEN: usize = 8 + 8 + 4 + 8 + 8 + 8 + 1 + 1 + 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated buffer at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("invalid op kind {value} at byte offset {offset}")]
    BadOpKind { offset: usize, value: u8 },
    #[error("invalid flag {value} at byte offset {offset}")]
    BadFlag { offset: usize, value: u8 },
}

pub fn encode_record(r: &LogRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.seq.to_le_bytes());
    out.extend_from_slice(&r.txn_id.to_le_bytes());
    out.extend_from_slice(&r.key.table.to_le_bytes());
    out.extend_from_slice(&r.key.row.to_le_bytes());
    out.extend_from_slice(&r.write_ts.to_le_bytes());
    out.extend_from_slice(&r.prev_seq.to_le_bytes());
    out.push(r.op.to_u8());
    out.push(u8::from(r.last_in_txn));
    out.extend_from_slice(&(r.value.len() as u32).to_le_bytes());
    out.extend_from_slice(&r.value);
}

/// Decodes one record from the front of `buf`, returning it and the number of
/// bytes consumed.
pub fn decode_record(buf: &[u8]) -> Result<(LogRecord, usize), DecodeError> {
    fn take<const N: usize>(
        buf: &[u8],
        off: &mut usize,
        what: &'static str,
    ) -> Result<[u8; N], DecodeError> {
        let end = *off + N;
        if buf.len() < end {
            return Err(DecodeError::Truncated { offset: buf.len().max(*off), what });
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&buf[*off..end]);
        *off = end;
        Ok(a)
    }

    let mut off = 0;
    let seq = u64::from_le_bytes(take::<8>(buf, &mut off, "seq")?);
    let txn_id = u64::from_le_bytes(take::<8>(buf, &mut off, "txn_id")?);
    let table = u32::from_le_bytes(take::<4>(buf, &mut off, "table_id")?);
    let row = u64::from_le_bytes(take::<8>(buf, &mut off, "row_id")?);
    let write_ts = u64::from_le_bytes(take::<8>(buf, &mut off, "write_ts")?);
    let prev_seq = u64::from_le_bytes(take::<8>(buf, &mut off, "prev_seq")?);
    let op_raw = take::<1>(buf, &mut off, "op_kind")?[0];
    let op = OpKind::from_u8(op_raw).ok_or(DecodeError::BadOpKind { offset: off - 1, value: op_raw })?;
    let flag = take::<1>(buf, &mut off, "last_in_txn")?[0];
    if flag > 1 {
        return Err(DecodeError::BadFlag { offset: off - 1, value: flag });
    }
    let value_len = u32::from_le_bytes(take::<4>(buf, &mut off, "value_len")?) as usize;
    if buf.len() < off + value_len {
        return Err(DecodeError::Truncated { offset: buf.len(), what: "value" });
    }
    let value = buf[off..off + value_len].to_vec();
    off += value_len;
    Ok((
        LogRecord {
            seq,
            txn_id,
            key: RowKey::new(table, row),
            op,
            value,
            write_ts,
            prev_seq,
            last_in_txn: flag == 1,
        },
        off,
    ))
}

/// Writes segments in the on-disk layout: per segment a
/// `(segment_index, record_count, preprocessed)` header, then the records.
pub fn dump_segments<W: Write>(segments: &[LogSegment], w: &mut W) -> io::Result<()> {
    let mut buf = Vec::new();
    for seg in segments {
        w.write_all(&seg.segment_index.to_le_bytes())?;
        w.write_all(&(seg.records.len() as u32).to_le_bytes())?;
        w.write_all(&[u8::from(seg.preprocessed)])?;
        for r in &seg.records {
            buf.clear();
            encode_record(r, &mut buf);
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("segment {segment}: {source}")]
    Record {
        segment: u32,
        #[source]
        source: DecodeError,
    },
    #[error("truncated segment header at byte offset {offset}")]
    TruncatedHeader { offset: usize },
}

/// Reads a file produced by [`dump_segments`].
pub fn load_segments<R: Read>(r: &mut R) -> Result<Vec<LogSegment>, LoadError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut off = 0;
    let mut segments = Vec::new();
    while off < data.len() {
        if data.len() < off + 9 {
            return Err(LoadError::TruncatedHeader { offset: data.len() });
        }
        let segment_index = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        let count = u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap()) as usize;
        let preprocessed = data[off + 8] == 1;
        off += 9;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let (rec, used) = decode_record(&data[off..])
                .map_err(|source| LoadError::Record { segment: segment_index, source })?;
            off += used;
            records.push(rec);
        }
        segments.push(LogSegment {
            segment_index,
            capacity: count.max(1),
            preprocessed,
            records,
        });
    }
    Ok(segments)
}

/// Convenience view over a segment list as one record stream.
pub fn iter_records(segments: &[LogSegment]) -> impl Iterator<Item = &LogRecord> {
    segments.iter().flat_map(|s| s.records.iter())
}

/// Total record count across segments.
pub fn record_count(segments: &[LogSegment]) -> usize {
    segments.iter().map(|s| s.records.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(table: u32, row: u64, v: u64) -> WriteOp {
        WriteOp::new(RowKey::new(table, row), OpKind::Insert, v.to_le_bytes().to_vec())
    }

    #[test]
    fn coalesce_merges_by_commit_ts() {
        let mut t0 = ThreadLog::new(0);
        t0.push(5, 10, vec![w(0, 1, 1), w(0, 2, 2)]);
        let mut t1 = ThreadLog::new(1);
        t1.push(3, 11, vec![w(0, 3, 3)]);
        let segs = coalesce(&[t0, t1], DEFAULT_SEGMENT_CAPACITY).unwrap();
        let recs: Vec<_> = iter_records(&segs).collect();
        assert_eq!(recs.len(), 3);
        // ts-3 transaction's records first, then the ts-5 transaction's.
        assert_eq!(recs[0].txn_id, 11);
        assert_eq!(recs[1].txn_id, 10);
        assert_eq!(recs[2].txn_id, 10);
        assert_eq!(recs.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(recs.iter().all(|r| r.prev_seq == 0));
        assert_eq!(recs[1].last_in_txn, false);
        assert_eq!(recs[2].last_in_txn, true);
    }

    #[test]
    fn coalesce_rejects_duplicate_commit_ts() {
        let mut t0 = ThreadLog::new(0);
        t0.push(7, 1, vec![w(0, 1, 1)]);
        let mut t1 = ThreadLog::new(1);
        t1.push(7, 2, vec![w(0, 2, 2)]);
        let err = coalesce(&[t0, t1], 16).unwrap_err();
        assert!(matches!(err, CoalesceError::DuplicateCommitTs { ts: 7, .. }));
    }

    #[test]
    fn coalesce_empty_input() {
        let segs = coalesce(&[], 16).unwrap();
        assert!(segs.is_empty());
        let segs = coalesce(&[ThreadLog::new(0)], 16).unwrap();
        assert!(segs.is_empty());
    }

    #[test]
    fn txn_never_spans_segments() {
        // Capacity 2: a 1-write txn then a 3-write txn. The big transaction
        // must move wholly into segment 1, leaving segment 0 short.
        let mut t0 = ThreadLog::new(0);
        t0.push(1, 1, vec![w(0, 1, 1)]);
        t0.push(2, 2, vec![w(0, 2, 2), w(0, 3, 3), w(0, 4, 4)]);
        let segs = coalesce(&[t0], 2).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].records.len(), 1);
        assert_eq!(segs[1].records.len(), 3);
        assert_eq!(segs[1].segment_index, 1);
        assert!(segs[1].records.iter().all(|r| r.txn_id == 2));
        // Sequence numbers stay gap-free across the split.
        let seqs: Vec<_> = iter_records(&segs).map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
    }

    #[test]
    fn contiguous_txn_ranges() {
        let mut t0 = ThreadLog::new(0);
        t0.push(1, 100, vec![w(0, 1, 1), w(0, 2, 2)]);
        t0.push(4, 101, vec![w(0, 3, 3)]);
        let mut t1 = ThreadLog::new(1);
        t1.push(2, 200, vec![w(0, 4, 4), w(0, 5, 5)]);
        let segs = coalesce(&[t0, t1], 3).unwrap();
        let recs: Vec<_> = iter_records(&segs).cloned().collect();
        let mut seen = std::collections::HashMap::new();
        for r in &recs {
            let range = seen.entry(r.txn_id).or_insert((r.seq, r.seq));
            range.1 = r.seq;
        }
        for (_, (first, last)) in seen {
            let spanned: Vec<_> =
                recs.iter().filter(|r| r.seq >= first && r.seq <= last).collect();
            assert!(spanned.iter().all(|r| r.txn_id == spanned[0].txn_id));
        }
    }

    #[test]
    fn codec_round_trip() {
        let r = LogRecord {
            seq: 42,
            txn_id: 7,
            key: RowKey::new(3, 900),
            op: OpKind::Update,
            value: vec![1, 2, 3, 4, 5],
            write_ts: 99,
            prev_seq: 17,
            last_in_txn: true,
        };
        let mut buf = Vec::new();
        encode_record(&r, &mut buf);
        let (back, used) = decode_record(&buf).unwrap();
        assert_eq!(back, r);
        assert_eq!(used, buf.len());
    }

    #[test]
    fn delete_encodes_header_only() {
        let r = LogRecord {
            seq: 1,
            txn_id: 1,
            key: RowKey::new(0, 5),
            op: OpKind::Delete,
            value: vec![],
            write_ts: 1,
            prev_seq: 0,
            last_in_txn: true,
        };
        let mut buf = Vec::new();
        encode_record(&r, &mut buf);
        assert_eq!(buf.len(), RECORD_HEADER_LEN);
        assert_eq!(decode_record(&buf).unwrap().0, r);
    }

    #[test]
    fn decode_truncated_mid_header_reports_offset() {
        let r = LogRecord {
            seq: 1,
            txn_id: 1,
            key: RowKey::new(0, 5),
            op: OpKind::Insert,
            value: vec![9],
            write_ts: 1,
            prev_seq: 0,
            last_in_txn: true,
        };
        let mut buf = Vec::new();
        encode_record(&r, &mut buf);
        let err = decode_record(&buf[..13]).unwrap_err();
        assert_eq!(err, DecodeError::Truncated { offset: 13, what: "txn_id" });
    }

    #[test]
    fn dump_and_load_round_trip() {
        let mut t0 = ThreadLog::new(0);
        t0.push(1, 1, vec![w(0, 1, 1), w(1, 2, 2)]);
        t0.push(2, 2, vec![w(0, 1, 3)]);
        let segs = coalesce(&[t0], 2).unwrap();
        let mut file = Vec::new();
        dump_segments(&segs, &mut file).unwrap();
        let back = load_segments(&mut &file[..]).unwrap();
        assert_eq!(back.len(), segs.len());
        for (a, b) in back.iter().zip(&segs) {
            assert_eq!(a.segment_index, b.segment_index);
            assert_eq!(a.preprocessed, b.preprocessed);
            assert_eq!(a.records, b.records);
        }
    }

    #[test]
    fn sink_streams_sealed_segments_in_commit_order() {
        let (tx, rx) = std::sync::mpsc::channel();
        let sink = LogSink::new(2, tx);
        let a = sink.append_txn(1, &[w(0, 1, 1)]);
        let b = sink.append_txn(2, &[w(0, 2, 2)]);
        assert!(a.write_ts < b.write_ts);
        assert_eq!((a.first_seq, a.last_seq), (1, 1));
        assert_eq!((b.first_seq, b.last_seq), (2, 2));
        let seg = rx.try_recv().unwrap();
        assert_eq!(seg.records.len(), 2);
        sink.append_txn(3, &[w(0, 3, 3)]);
        sink.finish();
        let tail = rx.try_recv().unwrap();
        assert_eq!(tail.records.len(), 1);
        assert_eq!(tail.records[0].seq, 3);
        assert!(rx.try_recv().is_err());
    }
}
