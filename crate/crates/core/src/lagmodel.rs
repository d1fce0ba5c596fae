//! Replication-lag models: closed-form curves for the protocol-class
//! impossibility arguments, constructed workloads that realize them, and a
//! discrete-event backup simulator that serves as an independent oracle.
//!
//! All arithmetic is exact: time is integer units and the curves are meant
//! to be compared with `==`, not tolerances. The simulator derives its
//! readiness rules from the same [`crate::constraints`] chain keys the real
//! replay backends order by, so the theorem checks exercise the production
//! ordering logic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use thiserror::Error;

use crate::constraints::{chain_key, Granularity};
use crate::primary::{ArrivedTxn, PrimOp, SimParams, TxnSpec};
use crate::types::{OpKind, RowKey, Seq, TxnId};

/// One point of a lag curve: transaction index `i` in log order, the times
/// the transaction became readable on the primary and backup, and their
/// difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagPoint {
    pub i: u64,
    pub f_p: u64,
    pub f_b: u64,
    pub lag: u64,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TheoremError {
    #[error("primary is bottlenecked: the construction needs m > ceil(e/d) = {needed} cores so the primary can outrun the backup, got m={m} (e={e}, d={d})")]
    PrimaryBottlenecked { m: usize, e: u64, d: u64, needed: u64 },
    #[error("writes per transaction too small: the construction needs n > ceil(e/d) = {needed} so each transaction costs the backup more than e (n*d > e), got n={n} (e={e}, d={d})")]
    WritesPerTxnTooSmall { n: u64, e: u64, d: u64, needed: u64 },
    #[error("hot page too small: the construction needs |S| > ceil(e/d) = {needed} co-located rows, got |S|={hot_rows} (e={e}, d={d})")]
    HotPageTooSmall { hot_rows: u64, e: u64, d: u64, needed: u64 },
    #[error("lag bound L must be at least 1, got {0}")]
    BoundTooSmall(u64),
}

/// Parameters for the transaction-granularity construction: transactions of
/// `n` writes arriving every `e` time units, the first `n-1` to unique keys
/// and the last to one shared key.
#[derive(Debug, Clone, Copy)]
pub struct TxnTheoremParams {
    pub sim: SimParams,
    /// Writes per transaction (n).
    pub writes_per_txn: u64,
    /// Claimed lag bound (L) the construction must exceed.
    pub bound: u64,
}

impl TxnTheoremParams {
    pub fn validate(&self) -> Result<(), TheoremError> {
        self.sim.validate().expect("invalid simulation parameters");
        let (m, e, d) = (self.sim.cores, self.sim.primary_op_cost, self.sim.backup_op_cost);
        let needed = ceil_div(e, d);
        if (m as u64) <= needed {
            return Err(TheoremError::PrimaryBottlenecked { m, e, d, needed });
        }
        if self.writes_per_txn <= needed {
            return Err(TheoremError::WritesPerTxnTooSmall { n: self.writes_per_txn, e, d, needed });
        }
        if self.bound == 0 {
            return Err(TheoremError::BoundTooSmall(self.bound));
        }
        Ok(())
    }

    /// Number of transactions needed so the final one exceeds the bound.
    pub fn txn_count(&self) -> Result<u64, TheoremError> {
        self.validate()?;
        let (e, d) = (self.sim.primary_op_cost, self.sim.backup_op_cost);
        Ok(ceil_div(self.bound, self.writes_per_txn * d - e))
    }
}

/// Closed-form lag curve for a transaction-granularity backup on the
/// constructed workload: f_p(i) = (n+i)e, f_b(i) = ne + (i+1)nd, so
/// lag(i) = i(nd - e) + nd grows without bound.
pub fn txn_granularity_curve(p: &TxnTheoremParams) -> Result<Vec<LagPoint>, TheoremError> {
    let count = p.txn_count()?;
    let (e, d) = (p.sim.primary_op_cost, p.sim.backup_op_cost);
    let n = p.writes_per_txn;
    Ok((0..count)
        .map(|i| {
            let f_p = (n + i) * e;
            let f_b = n * e + (i + 1) * n * d;
            LagPoint { i, f_p, f_b, lag: f_b - f_p }
        })
        .collect())
}

/// The constructed workload behind [`txn_granularity_curve`]: one
/// transaction every `e` time units, each inserting `n-1` unique rows and
/// then updating the shared hot row.
pub fn build_proof_txn_workload(p: &TxnTheoremParams) -> Result<Vec<TxnSpec>, TheoremError> {
    let count = p.txn_count()?;
    let e = p.sim.primary_op_cost;
    let n = p.writes_per_txn;
    let hot = RowKey::new(0, 0);
    let mut next_row = 1u64;
    Ok((0..count)
        .map(|i| {
            let mut ops = Vec::with_capacity(n as usize);
            for _ in 0..n - 1 {
                ops.push(PrimOp::Write {
                    key: RowKey::new(0, next_row),
                    op: OpKind::Insert,
                    value: i.to_le_bytes().to_vec(),
                });
                next_row += 1;
            }
            ops.push(PrimOp::Write {
                key: hot,
                op: OpKind::Update,
                value: i.to_le_bytes().to_vec(),
            });
            TxnSpec { txn_id: i + 1, ops, arrival_time: i * e }
        })
        .collect())
}

/// Parameters for the page-granularity construction: batches of
/// `n = min(m, |S|)` single-write transactions to distinct rows of one page,
/// arriving every `e` time units.
#[derive(Debug, Clone, Copy)]
pub struct PageTheoremParams {
    pub sim: SimParams,
    /// Rows co-located on the hottest page (|S|).
    pub hot_page_rows: u64,
    pub bound: u64,
}

impl PageTheoremParams {
    pub fn validate(&self) -> Result<(), TheoremError> {
        self.sim.validate().expect("invalid simulation parameters");
        let (m, e, d) = (self.sim.cores, self.sim.primary_op_cost, self.sim.backup_op_cost);
        let needed = ceil_div(e, d);
        if (m as u64) <= needed {
            return Err(TheoremError::PrimaryBottlenecked { m, e, d, needed });
        }
        if self.hot_page_rows <= needed {
            return Err(TheoremError::HotPageTooSmall { hot_rows: self.hot_page_rows, e, d, needed });
        }
        if self.bound == 0 {
            return Err(TheoremError::BoundTooSmall(self.bound));
        }
        Ok(())
    }

    /// Batch width n = min(m, |S|).
    pub fn batch_width(&self) -> u64 {
        (self.sim.cores as u64).min(self.hot_page_rows)
    }

    pub fn txn_count(&self) -> Result<u64, TheoremError> {
        self.validate()?;
        let (e, d) = (self.sim.primary_op_cost, self.sim.backup_op_cost);
        let n = self.batch_width();
        Ok(ceil_div(n * self.bound, n * d - e))
    }
}

/// Closed-form lag curve for a page-granularity backup on the constructed
/// workload: f_p(i) = floor((i+n)/n)e, f_b(i) = e + (i+1)d, and the lag
/// exceeds i(nd - e)/n.
pub fn page_granularity_curve(p: &PageTheoremParams) -> Result<Vec<LagPoint>, TheoremError> {
    let count = p.txn_count()?;
    let (e, d) = (p.sim.primary_op_cost, p.sim.backup_op_cost);
    let n = p.batch_width();
    Ok((0..count)
        .map(|i| {
            let f_p = ((i + n) / n) * e;
            let f_b = e + (i + 1) * d;
            LagPoint { i, f_p, f_b, lag: f_b - f_p }
        })
        .collect())
}

/// The constructed workload behind [`page_granularity_curve`]: batches of
/// `n` one-write transactions, each batch hitting `n` distinct rows that all
/// live on page 0 (rows cycle through `0..n`).
pub fn build_proof_page_workload(p: &PageTheoremParams) -> Result<Vec<TxnSpec>, TheoremError> {
    let count = p.txn_count()?;
    let e = p.sim.primary_op_cost;
    let n = p.batch_width();
    Ok((0..count)
        .map(|i| TxnSpec {
            txn_id: i + 1,
            ops: vec![PrimOp::Write {
                key: RowKey::new(0, i % n),
                op: OpKind::Update,
                value: i.to_le_bytes().to_vec(),
            }],
            arrival_time: (i / n) * e,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Discrete-event backup simulator
// ---------------------------------------------------------------------------

/// Backup protocol classes the simulator can replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimProtocol {
    /// One worker applying records strictly in log order.
    Single,
    /// Transactions with intersecting write sets serialize; one worker per
    /// transaction.
    TxnGranularity,
    /// Writes to the same page serialize.
    PageGranularity { rows_per_page: u64 },
    /// Writes to the same row serialize; nothing else does.
    RowGranularity,
    /// Row granularity plus the backward-compatible chain discipline: one
    /// worker per transaction, claimed in commit order.
    RowTxnChain,
}

/// Event-accurate `f_b` per transaction: a transaction becomes readable when
/// its last write finishes executing, each write costing `d` time units on
/// one of `workers` backup cores. Arrival at the backup is the primary
/// commit time (log delivery is instantaneous).
pub fn simulate_backup(
    arrivals: &[ArrivedTxn],
    protocol: SimProtocol,
    workers: usize,
    d: u64,
) -> Vec<LagPoint> {
    assert!(workers >= 1 && d >= 1);
    let f_b = match protocol {
        SimProtocol::Single => simulate_chained(arrivals, 1, d, |_| RowKey::new(0, 0)),
        SimProtocol::RowGranularity => {
            simulate_chained(arrivals, workers, d, |k| chain_key_owned(Granularity::Row, k))
        }
        SimProtocol::PageGranularity { rows_per_page } => simulate_chained(arrivals, workers, d, |k| {
            chain_key_owned(Granularity::Page { rows_per_page }, k)
        }),
        SimProtocol::TxnGranularity => simulate_txn_granularity(arrivals, workers, d),
        SimProtocol::RowTxnChain => simulate_txn_chain(arrivals, workers, d),
    };
    arrivals
        .iter()
        .zip(f_b)
        .enumerate()
        .map(|(i, (txn, f_b))| LagPoint { i: i as u64, f_p: txn.f_p, f_b, lag: f_b - txn.f_p })
        .collect()
}

fn chain_key_owned(g: Granularity, key: RowKey) -> RowKey {
    match g {
        Granularity::Page { rows_per_page } => RowKey::new(key.table, key.row / rows_per_page.max(1)),
        _ => key,
    }
}

#[derive(Default)]
struct Chain {
    queue: VecDeque<usize>,
    busy: bool,
}

/// Core of the single/row/page simulations: per-chain FIFO queues feed a
/// pool of identical workers; a record is dispatched when it heads its chain
/// and a worker is free, lower sequence numbers first.
fn simulate_chained(
    arrivals: &[ArrivedTxn],
    workers: usize,
    d: u64,
    key_of: impl Fn(RowKey) -> RowKey,
) -> Vec<u64> {
    // Flatten records; rec id is the index into this list.
    struct Rec {
        txn: usize,
        seq: Seq,
        chain: RowKey,
    }
    let mut recs: Vec<Rec> = Vec::new();
    for (t, txn) in arrivals.iter().enumerate() {
        for r in &txn.records {
            recs.push(Rec { txn: t, seq: r.seq, chain: key_of(r.key) });
        }
    }

    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum Ev {
        Arrive(usize),
        Done(usize),
    }
    let mut events: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut tick = 0u64;
    let mut rec_base = vec![0usize; arrivals.len()];
    {
        let mut base = 0;
        for (t, txn) in arrivals.iter().enumerate() {
            rec_base[t] = base;
            base += txn.records.len();
            events.push(Reverse((txn.f_p, tick, Ev::Arrive(t))));
            tick += 1;
        }
    }

    let mut chains: HashMap<RowKey, Chain> = HashMap::new();
    let mut ready: BinaryHeap<Reverse<(Seq, usize)>> = BinaryHeap::new();
    let mut remaining: Vec<usize> = arrivals.iter().map(|t| t.records.len()).collect();
    let mut f_b = vec![0u64; arrivals.len()];
    let mut free = workers;

    while let Some(Reverse((now, _, ev))) = events.pop() {
        match ev {
            Ev::Arrive(t) => {
                for rid in rec_base[t]..rec_base[t] + arrivals[t].records.len() {
                    let chain = chains.entry(recs[rid].chain).or_default();
                    chain.queue.push_back(rid);
                    if chain.queue.len() == 1 && !chain.busy {
                        ready.push(Reverse((recs[rid].seq, rid)));
                    }
                }
            }
            Ev::Done(rid) => {
                free += 1;
                let chain = chains.get_mut(&recs[rid].chain).unwrap();
                chain.busy = false;
                let popped = chain.queue.pop_front();
                debug_assert_eq!(popped, Some(rid));
                if let Some(&head) = chain.queue.front() {
                    ready.push(Reverse((recs[head].seq, head)));
                }
                let t = recs[rid].txn;
                remaining[t] -= 1;
                if remaining[t] == 0 {
                    f_b[t] = now;
                }
            }
        }
        while free > 0 {
            let Some(Reverse((_, rid))) = ready.pop() else { break };
            free -= 1;
            chains.get_mut(&recs[rid].chain).unwrap().busy = true;
            events.push(Reverse((now + d, tick, Ev::Done(rid))));
            tick += 1;
        }
    }
    f_b
}

/// Transaction-granularity simulation: a transaction starts only when its
/// write-set predecessors have completed and a worker is free; its writes
/// then run serially on that worker.
fn simulate_txn_granularity(arrivals: &[ArrivedTxn], workers: usize, d: u64) -> Vec<u64> {
    let n = arrivals.len();
    // Per-key last-writer edges carry the full dependency closure.
    let mut last_writer: HashMap<RowKey, usize> = HashMap::new();
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (t, txn) in arrivals.iter().enumerate() {
        let mut preds: Vec<usize> = Vec::new();
        for r in &txn.records {
            if let Some(&p) = last_writer.get(&r.key) {
                if p != t && !preds.contains(&p) {
                    preds.push(p);
                }
            }
            last_writer.insert(r.key, t);
        }
        for p in preds {
            succs[p].push(t);
            indeg[t] += 1;
        }
    }

    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum Ev {
        Arrive(usize),
        TxnDone(usize),
    }
    let mut events: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut tick = 0u64;
    for (t, txn) in arrivals.iter().enumerate() {
        events.push(Reverse((txn.f_p, tick, Ev::Arrive(t))));
        tick += 1;
    }
    let mut arrived = vec![false; n];
    let mut ready: BinaryHeap<Reverse<usize>> = BinaryHeap::new();
    let mut free = workers;
    let mut f_b = vec![0u64; n];

    while let Some(Reverse((now, _, ev))) = events.pop() {
        match ev {
            Ev::Arrive(t) => {
                arrived[t] = true;
                if indeg[t] == 0 {
                    ready.push(Reverse(t));
                }
            }
            Ev::TxnDone(t) => {
                free += 1;
                f_b[t] = now;
                for &s in &succs[t] {
                    indeg[s] -= 1;
                    if indeg[s] == 0 && arrived[s] {
                        ready.push(Reverse(s));
                    }
                }
            }
        }
        while free > 0 {
            let Some(Reverse(t)) = ready.pop() else { break };
            free -= 1;
            let cost = arrivals[t].records.len() as u64 * d;
            events.push(Reverse((now + cost, tick, Ev::TxnDone(t))));
            tick += 1;
        }
    }
    f_b
}

/// Chain-discipline simulation: workers claim whole transactions in commit
/// order; each write waits for the previous write to its row, and the worker
/// stays blocked on its transaction until the chain completes.
fn simulate_txn_chain(arrivals: &[ArrivedTxn], workers: usize, d: u64) -> Vec<u64> {
    let mut worker_free: BinaryHeap<Reverse<u64>> = BinaryHeap::new();
    for _ in 0..workers {
        worker_free.push(Reverse(0));
    }
    let mut chain_done: HashMap<RowKey, u64> = HashMap::new();
    let mut f_b = vec![0u64; arrivals.len()];
    for (t, txn) in arrivals.iter().enumerate() {
        let Reverse(free_at) = worker_free.pop().unwrap();
        let mut now = txn.f_p.max(free_at);
        for r in &txn.records {
            let after = chain_done.get(&r.key).copied().unwrap_or(0);
            now = now.max(after) + d;
            chain_done.insert(r.key, now);
        }
        f_b[t] = now;
        worker_free.push(Reverse(now));
    }
    f_b
}

// ---------------------------------------------------------------------------
// Curve analysis
// ---------------------------------------------------------------------------

/// The exact per-step lag difference at the given stride, if it is the same
/// everywhere along the curve.
pub fn lag_step(curve: &[LagPoint], stride: usize) -> Option<i64> {
    if curve.len() <= stride || stride == 0 {
        return None;
    }
    let step = curve[stride].lag as i64 - curve[0].lag as i64;
    for w in curve.windows(stride + 1) {
        if w[stride].lag as i64 - w[0].lag as i64 != step {
            return None;
        }
    }
    Some(step)
}

/// First index from which the lag is exactly constant through the end.
pub fn constant_lag_from(curve: &[LagPoint]) -> Option<usize> {
    let last = curve.last()?.lag;
    let mut idx = curve.len();
    for (i, p) in curve.iter().enumerate().rev() {
        if p.lag != last {
            break;
        }
        idx = i;
    }
    (idx < curve.len()).then_some(idx)
}

/// Maps a replay protocol name onto the pairwise constraint model it obeys.
pub fn granularity_of(protocol: SimProtocol) -> Granularity {
    match protocol {
        SimProtocol::Single => Granularity::Single,
        SimProtocol::TxnGranularity | SimProtocol::RowTxnChain => Granularity::Txn,
        SimProtocol::PageGranularity { rows_per_page } => Granularity::Page { rows_per_page },
        SimProtocol::RowGranularity => Granularity::Row,
    }
}

// Used by the simulator via `chain_key_owned`; re-exported for callers that
// want to reason about a record's chain directly.
pub use crate::constraints::chain_key as record_chain_key;
