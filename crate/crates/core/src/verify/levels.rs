//! Dependency levels checked over execution traces.
//!
//! Dependencies are rebuilt from the trace rather than taken from the
//! engine: a read depends on the last write applied to the same key before
//! it, consecutive applies on a key form a write-after-write pair, and a
//! reader precedes whoever next overwrites the version it read.
//!
//! A transaction's commit point is the first moment the engine would let it
//! commit: the first `Durable` event on its own buffer covering its SSN for
//! write-only transactions, the first `Csn` event covering it for the rest,
//! or its acknowledgement if that came earlier. Commit order sorts by
//! `(point, ssn, read-only last, id)`, so transactions released by the same
//! event are ordered by SSN.
//!
//! * recoverable: a committed reader commits after the writer it read from,
//!   and every overwrite carries a larger SSN than the write it replaces;
//! * rigorous: additionally reads and overwrites respect both orders, and a
//!   reader precedes the next overwriter of what it read in both orders;
//! * sequential: rigorous, and commit order agrees with SSN order over all
//!   committed transactions that carry a log record.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::types::{Key, Ssn, TxnClass, TxnId};
use crate::verify::trace::{Event, ExecutionTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dependency {
    ReadAfterWrite,
    WriteAfterWrite,
    WriteAfterRead,
}

/// Which order a pair broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Commit,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub dependency: Option<Dependency>,
    pub order: Order,
    /// The transaction that must come first.
    pub first: TxnId,
    pub second: TxnId,
    pub key: Option<Key>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.dependency {
            Some(d) => format!("{d:?}"),
            None => "independent".to_string(),
        };
        write!(
            f,
            "{what} pair {} -> {} breaks {:?} order",
            self.first, self.second, self.order
        )?;
        if let Some(k) = self.key {
            write!(f, " on key {k}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Violation(Violation),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Per-transaction facts gathered from a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnFacts {
    pub id: TxnId,
    pub ssn: Option<Ssn>,
    pub class: Option<TxnClass>,
    pub buffer: Option<usize>,
    /// Event index of the acknowledgement, if any.
    pub ack: Option<usize>,
    /// Event index at which the transaction became committable, if before
    /// the crash.
    pub commit_point: Option<usize>,
}

impl TxnFacts {
    pub fn committed(&self) -> bool {
        self.commit_point.is_some()
    }

    fn has_record(&self) -> bool {
        self.class.map_or(self.ssn.is_some(), TxnClass::has_record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub dependency: Dependency,
    pub from: TxnId,
    pub to: TxnId,
    pub key: Key,
}

/// Dependencies and commit points of one trace.
#[derive(Debug, Clone)]
pub struct TraceAnalysis {
    pub txns: BTreeMap<TxnId, TxnFacts>,
    pub edges: Vec<Edge>,
}

impl TraceAnalysis {
    pub fn new(trace: &ExecutionTrace) -> TraceAnalysis {
        let events = trace.before_crash();
        let mut txns: BTreeMap<TxnId, TxnFacts> = BTreeMap::new();
        // Applies per key in trace order: (index, writer).
        let mut applies: HashMap<Key, Vec<(usize, TxnId)>> = HashMap::new();
        let mut reads: Vec<(usize, TxnId, Key)> = Vec::new();
        for (i, e) in events.iter().enumerate() {
            match e {
                Event::Read { txn, key, .. } => {
                    facts(&mut txns, *txn);
                    reads.push((i, *txn, *key));
                }
                Event::WriteApply { txn, key, ssn, .. } => {
                    facts(&mut txns, *txn).ssn = Some(*ssn);
                    applies.entry(*key).or_default().push((i, *txn));
                }
                Event::Enqueue {
                    txn,
                    ssn,
                    class,
                    buffer,
                } => {
                    let f = facts(&mut txns, *txn);
                    f.ssn = Some(*ssn);
                    f.class = Some(*class);
                    f.buffer = Some(*buffer);
                }
                Event::Commit {
                    txn,
                    ssn,
                    class,
                    buffer,
                } => {
                    let f = facts(&mut txns, *txn);
                    f.ssn = Some(*ssn);
                    f.class = Some(*class);
                    f.buffer = Some(*buffer);
                    f.ack.get_or_insert(i);
                }
                _ => {}
            }
        }

        for f in txns.values_mut() {
            f.commit_point = commit_point(events, f);
        }

        let mut edges = Vec::new();
        for list in applies.values() {
            for pair in list.windows(2) {
                let (_, a) = pair[0];
                let (_, b) = pair[1];
                if a != b {
                    edges.push(Edge {
                        dependency: Dependency::WriteAfterWrite,
                        from: a,
                        to: b,
                        key: key_of(events, pair[1].0),
                    });
                }
            }
        }
        for &(at, reader, key) in &reads {
            let list = applies.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            let split = list.partition_point(|&(i, _)| i < at);
            if let Some(&(_, writer)) = split.checked_sub(1).map(|j| &list[j]) {
                if writer != reader {
                    edges.push(Edge {
                        dependency: Dependency::ReadAfterWrite,
                        from: writer,
                        to: reader,
                        key,
                    });
                }
            }
            if let Some(&(_, next)) = list.get(split) {
                if next != reader {
                    edges.push(Edge {
                        dependency: Dependency::WriteAfterRead,
                        from: reader,
                        to: next,
                        key,
                    });
                }
            }
        }
        edges.sort_by_key(|e| (e.from, e.to, e.key));
        TraceAnalysis { txns, edges }
    }

    pub fn committed(&self) -> impl Iterator<Item = &TxnFacts> {
        self.txns.values().filter(|f| f.committed())
    }

    /// Total commit order key; `None` for uncommitted transactions.
    fn commit_key(&self, id: TxnId) -> Option<(usize, Ssn, bool, TxnId)> {
        let f = self.txns.get(&id)?;
        let point = f.commit_point?;
        let ssn = f.ssn.unwrap_or(Ssn::ZERO);
        Some((point, ssn, f.class == Some(TxnClass::ReadOnly), id))
    }

    fn ssn_of(&self, id: TxnId) -> Option<Ssn> {
        self.txns.get(&id).and_then(|f| f.ssn)
    }

    fn record_bearing(&self, id: TxnId) -> bool {
        self.txns.get(&id).is_some_and(TxnFacts::has_record)
    }

    fn violation(e: &Edge, order: Order) -> Verdict {
        Verdict::Violation(Violation {
            dependency: Some(e.dependency),
            order,
            first: e.from,
            second: e.to,
            key: Some(e.key),
        })
    }

    /// `second` committed implies `first` committed earlier.
    fn commit_order_holds(&self, e: &Edge) -> bool {
        match self.commit_key(e.to) {
            None => true,
            Some(second) => self.commit_key(e.from).is_some_and(|first| first < second),
        }
    }

    /// Both carry records implies `first` has the smaller SSN.
    fn sequence_order_holds(&self, e: &Edge) -> bool {
        if !(self.record_bearing(e.from) && self.record_bearing(e.to)) {
            return true;
        }
        match (self.ssn_of(e.from), self.ssn_of(e.to)) {
            (Some(a), Some(b)) => a < b,
            _ => true,
        }
    }

    fn war_commit_holds(&self, e: &Edge) -> bool {
        // A reader that never committed left no trace in the history.
        match (self.commit_key(e.from), self.commit_key(e.to)) {
            (Some(first), Some(second)) => first < second,
            _ => true,
        }
    }

    pub fn check_recoverability(&self) -> Verdict {
        for e in &self.edges {
            match e.dependency {
                Dependency::ReadAfterWrite if !self.commit_order_holds(e) => {
                    return Self::violation(e, Order::Commit)
                }
                Dependency::WriteAfterWrite if !self.sequence_order_holds(e) => {
                    return Self::violation(e, Order::Sequence)
                }
                _ => {}
            }
        }
        Verdict::Pass
    }

    pub fn check_rigorousness(&self) -> Verdict {
        let base = self.check_recoverability();
        if !base.is_pass() {
            return base;
        }
        for e in &self.edges {
            let (commit_ok, seq_ok) = match e.dependency {
                Dependency::ReadAfterWrite => (true, self.sequence_order_holds(e)),
                Dependency::WriteAfterWrite => (self.commit_order_holds(e), true),
                Dependency::WriteAfterRead => {
                    (self.war_commit_holds(e), self.sequence_order_holds(e))
                }
            };
            if !commit_ok {
                return Self::violation(e, Order::Commit);
            }
            if !seq_ok {
                return Self::violation(e, Order::Sequence);
            }
        }
        Verdict::Pass
    }

    pub fn check_sequentiality(&self) -> Verdict {
        let base = self.check_rigorousness();
        if !base.is_pass() {
            return base;
        }
        let mut order: Vec<_> = self
            .committed()
            .filter(|f| f.has_record())
            .filter_map(|f| self.commit_key(f.id))
            .collect();
        order.sort();
        for pair in order.windows(2) {
            let (_, a_ssn, _, a) = pair[0];
            let (_, b_ssn, _, b) = pair[1];
            if a_ssn >= b_ssn {
                return Verdict::Violation(Violation {
                    dependency: None,
                    order: Order::Sequence,
                    first: a,
                    second: b,
                    key: None,
                });
            }
        }
        Verdict::Pass
    }
}

fn facts(txns: &mut BTreeMap<TxnId, TxnFacts>, id: TxnId) -> &mut TxnFacts {
    txns.entry(id).or_insert(TxnFacts {
        id,
        ssn: None,
        class: None,
        buffer: None,
        ack: None,
        commit_point: None,
    })
}

fn key_of(events: &[Event], i: usize) -> Key {
    match &events[i] {
        Event::WriteApply { key, .. } => *key,
        _ => unreachable!("index points at a write apply"),
    }
}

fn commit_point(events: &[Event], f: &TxnFacts) -> Option<usize> {
    let durable = match (f.class, f.ssn, f.buffer) {
        (Some(TxnClass::WriteOnly), Some(ssn), Some(buffer)) => events.iter().position(
            |e| matches!(e, Event::Durable { buffer: b, dsn } if *b == buffer && *dsn >= ssn),
        ),
        (Some(_), Some(ssn), _) => events
            .iter()
            .position(|e| matches!(e, Event::Csn { csn } if *csn >= ssn)),
        _ => None,
    };
    match (durable, f.ack) {
        (Some(d), Some(a)) => Some(d.min(a)),
        (d, a) => d.or(a),
    }
}

pub fn check_recoverability(trace: &ExecutionTrace) -> Verdict {
    TraceAnalysis::new(trace).check_recoverability()
}

pub fn check_rigorousness(trace: &ExecutionTrace) -> Verdict {
    TraceAnalysis::new(trace).check_rigorousness()
}

pub fn check_sequentiality(trace: &ExecutionTrace) -> Verdict {
    TraceAnalysis::new(trace).check_sequentiality()
}

/// All three verdicts, strictest last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelReport {
    pub recoverable: Verdict,
    pub rigorous: Verdict,
    pub sequential: Verdict,
}

impl LevelReport {
    pub fn new(trace: &ExecutionTrace) -> LevelReport {
        let a = TraceAnalysis::new(trace);
        LevelReport {
            recoverable: a.check_recoverability(),
            rigorous: a.check_rigorousness(),
            sequential: a.check_sequentiality(),
        }
    }

    /// Sequential implies rigorous implies recoverable.
    pub fn hierarchy_holds(&self) -> bool {
        (!self.sequential.is_pass() || self.rigorous.is_pass())
            && (!self.rigorous.is_pass() || self.recoverable.is_pass())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(txn: u64, key: Key, ssn: u64) -> Event {
        Event::WriteApply {
            txn: TxnId(txn),
            key,
            ssn: Ssn(ssn),
            value: vec![txn as u8],
        }
    }

    fn read(txn: u64, key: Key, observed: u64) -> Event {
        Event::Read {
            txn: TxnId(txn),
            key,
            observed: Ssn(observed),
        }
    }

    fn commit(txn: u64, ssn: u64, class: TxnClass, buffer: usize) -> Event {
        Event::Commit {
            txn: TxnId(txn),
            ssn: Ssn(ssn),
            class,
            buffer,
        }
    }

    #[test]
    fn serial_run_is_sequential() {
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 1),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(1),
            },
            Event::Csn { csn: Ssn(1) },
            commit(1, 1, TxnClass::WriteOnly, 0),
            read(2, 0, 1),
            apply(2, 1, 2),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(2),
            },
            Event::Csn { csn: Ssn(2) },
            commit(2, 2, TxnClass::HasReads, 0),
        ]);
        let r = LevelReport::new(&t);
        assert!(r.sequential.is_pass(), "{r:?}");
        assert!(r.rigorous.is_pass());
        assert!(r.recoverable.is_pass());
    }

    #[test]
    fn reader_committed_before_writer_is_unrecoverable() {
        // T2 read T1's write but was acknowledged first.
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 1),
            read(2, 0, 1),
            apply(2, 1, 2),
            commit(2, 2, TxnClass::HasReads, 1),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(1),
            },
            commit(1, 1, TxnClass::WriteOnly, 0),
        ]);
        let v = check_recoverability(&t);
        assert_eq!(
            v,
            Verdict::Violation(Violation {
                dependency: Some(Dependency::ReadAfterWrite),
                order: Order::Commit,
                first: TxnId(1),
                second: TxnId(2),
                key: Some(0),
            })
        );
    }

    #[test]
    fn overwrite_with_smaller_ssn_is_unrecoverable() {
        let t = ExecutionTrace::new(vec![apply(1, 0, 5), apply(2, 0, 3)]);
        let Verdict::Violation(v) = check_recoverability(&t) else {
            panic!("expected violation");
        };
        assert_eq!(v.dependency, Some(Dependency::WriteAfterWrite));
        assert_eq!(v.order, Order::Sequence);
    }

    #[test]
    fn war_pair_in_either_commit_order_is_recoverable() {
        // T1 reads x, T2 overwrites x; T2 commits first.
        let t = ExecutionTrace::new(vec![
            read(1, 0, 0),
            apply(2, 0, 1),
            apply(1, 1, 1),
            Event::Durable {
                buffer: 1,
                dsn: Ssn(1),
            },
            commit(2, 1, TxnClass::WriteOnly, 1),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(1),
            },
            Event::Csn { csn: Ssn(1) },
            commit(1, 1, TxnClass::HasReads, 0),
        ]);
        let r = LevelReport::new(&t);
        assert!(r.recoverable.is_pass());
        let Verdict::Violation(v) = &r.rigorous else {
            panic!("expected rigorousness violation");
        };
        assert_eq!(v.dependency, Some(Dependency::WriteAfterRead));
        assert!(r.hierarchy_holds());
    }

    #[test]
    fn independent_buffers_break_sequentiality_only() {
        // Buffer 1 flushes its later SSN first.
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 1),
            apply(2, 1, 2),
            Event::Durable {
                buffer: 1,
                dsn: Ssn(2),
            },
            commit(2, 2, TxnClass::WriteOnly, 1),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(1),
            },
            Event::Csn { csn: Ssn(1) },
            commit(1, 1, TxnClass::WriteOnly, 0),
        ]);
        let r = LevelReport::new(&t);
        assert!(r.rigorous.is_pass());
        assert!(!r.sequential.is_pass());
    }

    #[test]
    fn commit_point_precedes_late_ack() {
        // T1's worker acknowledges late, but T1 was committable before T2.
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 1),
            read(2, 0, 1),
            apply(2, 1, 2),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(2),
            },
            Event::Durable {
                buffer: 1,
                dsn: Ssn(2),
            },
            Event::Csn { csn: Ssn(2) },
            commit(2, 2, TxnClass::HasReads, 1),
            commit(1, 1, TxnClass::WriteOnly, 0),
        ]);
        assert!(check_recoverability(&t).is_pass());
    }

    #[test]
    fn events_after_crash_are_ignored() {
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 1),
            read(2, 0, 1),
            apply(2, 1, 2),
            Event::Crash,
            commit(2, 2, TxnClass::HasReads, 1),
        ]);
        let a = TraceAnalysis::new(&t);
        assert_eq!(a.committed().count(), 0);
        assert!(a.check_recoverability().is_pass());
    }

    #[test]
    fn readonly_reader_sharing_writer_ssn_commits_after_it() {
        let t = ExecutionTrace::new(vec![
            apply(1, 0, 4),
            read(2, 0, 4),
            Event::Durable {
                buffer: 0,
                dsn: Ssn(4),
            },
            Event::Csn { csn: Ssn(4) },
            commit(2, 4, TxnClass::ReadOnly, 0),
            commit(1, 4, TxnClass::HasReads, 0),
        ]);
        assert!(LevelReport::new(&t).sequential.is_pass());
    }
}
