//! In-memory transactional key-value engine with partially ordered
//! parallel logging.
//!
//! Transactions run optimistic concurrency control over a fixed table and
//! write one redo record each into one of several log buffers. Each buffer
//! has its own logger and device. Sequence numbers are allocated per buffer
//! and only order transactions that share a read-after-write or
//! write-after-write dependency, so buffers flush independently; commit
//! acknowledgement waits just long enough to keep every dependency
//! recoverable.
//!
//! The crate also carries fuzzy checkpointing, parallel recovery and the
//! verification tooling (dependency-level checkers, a crash-consistency
//! oracle and a deterministic scheduler) used by the test suites.

pub mod checkpoint;
pub mod commit;
pub mod device;
pub mod engine;
pub mod invariants;
pub mod record;
pub mod recovery;
pub mod sequence;
pub mod txn;
pub mod types;
pub mod verify;
pub mod wal;

pub use engine::{Engine, EngineError, EngineOptions, FaultMode, Logger, SequencePolicy, Worker};
pub use types::{Config, Key, Ssn, TxnClass, TxnId, TxnState};
