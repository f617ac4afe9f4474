//! Commit stage: per-worker queues and the global committable SSN.
//!
//! Write-only transactions wait in `Qww` until their own buffer's DSN covers
//! them; they have no RAW predecessors, and their WAW predecessors carry
//! smaller SSNs, so last-writer-wins replay orders them correctly. Every
//! other transaction waits in `Qwr` until the CSN, the minimum DSN over all
//! buffers, covers it, which makes every RAW predecessor durable first.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::invariants::{self, Check};
use crate::types::{Ssn, TxnClass, TxnId};
use crate::verify::trace::{Event, TraceRecorder};
use crate::wal::LogBuffer;

/// How queued transactions become committable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitRule {
    /// `Qww` against the own buffer's DSN, `Qwr` against the CSN.
    Partial,
    /// Both queues against the own buffer's DSN (single-buffer baseline).
    TotalOrder,
    /// Commit at once without waiting for durability. Deliberately broken;
    /// exists to prove the crash oracle catches it.
    Unchecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pending {
    pub txn: TxnId,
    pub ssn: Ssn,
    pub class: TxnClass,
    pub began_at: Instant,
    pub enqueued_at: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Committed {
    pub txn: TxnId,
    pub ssn: Ssn,
    pub class: TxnClass,
    pub began_at: Instant,
    pub enqueued_at: Instant,
    pub committed_at: Instant,
}

/// A worker's `Qww` and `Qwr`.
#[derive(Debug, Default)]
pub struct CommitQueues {
    qww: VecDeque<Pending>,
    qwr: VecDeque<Pending>,
}

impl CommitQueues {
    pub fn new() -> Self {
        CommitQueues::default()
    }

    pub fn enqueue(&mut self, entry: Pending) {
        let queue = match entry.class {
            TxnClass::WriteOnly => &mut self.qww,
            TxnClass::HasReads | TxnClass::ReadOnly => &mut self.qwr,
        };
        // Read-only entries carry their base SSN, which may be smaller than
        // earlier record-bearing ones; only the latter are ordered.
        if entry.class.has_record() {
            if let Some(last) = queue.iter().rev().find(|p| p.class.has_record()) {
                debug_assert!(last.ssn <= entry.ssn, "queue out of ssn order");
            }
        }
        queue.push_back(entry);
    }

    pub fn qww_len(&self) -> usize {
        self.qww.len()
    }

    pub fn qwr_len(&self) -> usize {
        self.qwr.len()
    }

    pub fn len(&self) -> usize {
        self.qww.len() + self.qwr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn qww_head(&self) -> Option<&Pending> {
        self.qww.front()
    }

    pub fn qwr_head(&self) -> Option<&Pending> {
        self.qwr.front()
    }

    /// Pops the head entries each queue admits.
    pub fn drain_committable(
        &mut self,
        qww_limit: Option<Ssn>,
        qwr_limit: Option<Ssn>,
        mut commit: impl FnMut(Pending),
    ) {
        for (queue, limit) in [(&mut self.qww, qww_limit), (&mut self.qwr, qwr_limit)] {
            while let Some(head) = queue.front() {
                if limit.is_some_and(|l| head.ssn > l) {
                    break;
                }
                commit(queue.pop_front().expect("non-empty"));
            }
        }
    }
}

/// Owner of the CSN.
#[derive(Debug)]
pub struct CommitCoordinator {
    csn: AtomicU64,
    buffers: Vec<Arc<LogBuffer>>,
    rule: CommitRule,
}

impl CommitCoordinator {
    pub fn new(buffers: Vec<Arc<LogBuffer>>, rule: CommitRule) -> Self {
        CommitCoordinator {
            csn: AtomicU64::new(0),
            buffers,
            rule,
        }
    }

    pub fn rule(&self) -> CommitRule {
        self.rule
    }

    pub fn csn(&self) -> Ssn {
        Ssn(self.csn.load(Ordering::Acquire))
    }

    pub fn buffers(&self) -> &[Arc<LogBuffer>] {
        &self.buffers
    }

    /// Recomputes the CSN as the minimum DSN and publishes it if it grew.
    pub fn advance_csn(&self, trace: Option<&TraceRecorder>) -> Ssn {
        let update = || {
            let min = self
                .buffers
                .iter()
                .map(|b| b.dsn())
                .min()
                .unwrap_or(Ssn::ZERO);
            let prev = self.csn.fetch_max(min.0, Ordering::AcqRel);
            let csn = Ssn(prev.max(min.0));
            // DSNs only grow, so the published value stays below all of them.
            for b in &self.buffers {
                let dsn = b.dsn();
                invariants::check(csn <= dsn, Check::CsnAboveMinDsn, || {
                    format!("csn {csn} above buffer {} dsn {dsn}", b.id())
                });
            }
            let event = (min.0 > prev).then_some(Event::Csn { csn });
            (event, csn)
        };
        match trace {
            Some(t) => t.publish(update),
            None => update().1,
        }
    }

    /// Commits every head entry of `queues` that the rule admits, given the
    /// worker's mapped buffer.
    pub fn try_commit(
        &self,
        queues: &mut CommitQueues,
        buffer: usize,
        trace: Option<&TraceRecorder>,
    ) -> Vec<Committed> {
        let dsn = self.buffers[buffer].dsn();
        let (qww, qwr) = match self.rule {
            CommitRule::Partial => (Some(dsn), Some(self.csn())),
            CommitRule::TotalOrder => (Some(dsn), Some(dsn)),
            CommitRule::Unchecked => (None, None),
        };
        let mut done = Vec::new();
        let now = Instant::now();
        queues.drain_committable(qww, qwr, |p| {
            if let Some(t) = trace {
                t.record(Event::Commit {
                    txn: p.txn,
                    ssn: p.ssn,
                    class: p.class,
                    buffer,
                });
            }
            done.push(Committed {
                txn: p.txn,
                ssn: p.ssn,
                class: p.class,
                began_at: p.began_at,
                enqueued_at: p.enqueued_at,
                committed_at: now,
            });
        });
        done
    }
}
