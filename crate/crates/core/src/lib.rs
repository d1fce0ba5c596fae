//! Primary-backup replication engine with pluggable backup replay protocols.
//!
//! The crate models a single-primary, single-backup pair. The primary runs
//! read-write transactions under strict two-phase locking and emits a totally
//! ordered write log. The backup replays that log under one of several
//! protocols while serving read-only transactions from prefix-consistent
//! snapshots:
//!
//! - [`c5`]: row-granularity replay. A scheduler threads per-row ordering
//!   metadata through the log, workers apply non-conflicting writes in
//!   parallel, and a snapshotter advances a `(c, n)` cursor so readers only
//!   ever observe complete log prefixes.
//! - [`baselines`]: single-threaded, transaction-granularity, and
//!   page-granularity replay, for comparison.
//!
//! [`lagmodel`] evaluates the replication-lag behavior of each protocol class
//! both in closed form and with a discrete-event simulator, and
//! [`mpc`] checks every exposed backup state against a serial-replay oracle.

pub mod baselines;
pub mod c5;
pub mod constraints;
pub mod lagmodel;
pub mod log;
pub mod mpc;
pub mod mvstore;
pub mod primary;
pub mod types;

pub use types::{OpKind, RowKey, Seq, TableId, TxnId};
