//! End-to-end crash consistency check.
//!
//! After a crash and recovery, let `R` be the transactions whose effects
//! recovery kept: the records it replayed plus every writer whose SSN lies
//! at or below the checkpoint's RSN (durable everywhere before the
//! checkpoint started). The recovered state is consistent when
//!
//! 1. every transaction that reached its commit point before the crash and
//!    wrote something is in `R`;
//! 2. no member of `R`, and no committed reader, read a value written by a
//!    transaction outside `R`;
//! 3. every tuple holds the value and SSN of the last write that a member
//!    of `R` applied to it during the run, or its initial contents if none
//!    did.
//!
//! Check 3 takes "last" in execution order. Replay takes it in SSN order,
//! so a run whose overwrites do not carry growing SSNs fails here.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::recovery::RecoveryPlan;
use crate::txn::{Table, TupleData};
use crate::types::{Key, Ssn, TxnId};
use crate::verify::levels::{Dependency, TraceAnalysis};
use crate::verify::trace::{Event, ExecutionTrace};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inconsistency {
    /// A committed writer's effects are missing.
    LostCommit { txn: TxnId },
    /// A surviving or committed transaction read from one that did not
    /// survive.
    DanglingRead {
        reader: TxnId,
        writer: TxnId,
        key: Key,
    },
    /// A tuple differs from what the surviving writers produced.
    WrongValue {
        key: Key,
        expected_ssn: Ssn,
        found_ssn: Ssn,
        expected_writer: Option<TxnId>,
    },
    /// The recovered table does not have the expected shape.
    TableSize { expected: u64, found: u64 },
}

impl fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inconsistency::LostCommit { txn } => write!(f, "committed {txn} lost"),
            Inconsistency::DanglingRead { reader, writer, key } => {
                write!(f, "{reader} read key {key} from lost {writer}")
            }
            Inconsistency::WrongValue {
                key,
                expected_ssn,
                found_ssn,
                expected_writer,
            } => write!(
                f,
                "key {key}: expected ssn {expected_ssn} from {expected_writer:?}, found ssn {found_ssn}"
            ),
            Inconsistency::TableSize { expected, found } => {
                write!(f, "table has {found} tuples, expected {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleVerdict {
    Pass,
    Violation(Vec<Inconsistency>),
}

impl OracleVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, OracleVerdict::Pass)
    }
}

/// What recovery claims to have kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Survivors {
    /// Transactions whose records were replayed.
    pub replayed: BTreeSet<TxnId>,
    /// Writers at or below this SSN are covered by the checkpoint.
    pub rsns: Ssn,
}

impl Survivors {
    pub fn from_recovery(plan: &RecoveryPlan, replayed: &BTreeSet<TxnId>) -> Survivors {
        Survivors {
            replayed: replayed.clone(),
            rsns: plan.rsns,
        }
    }
}

/// Checks a recovered table against the trace of the run that crashed.
/// `initial` is the table contents the run started from.
pub fn consistency_oracle(
    recovered: &Table,
    initial: &[TupleData],
    trace: &ExecutionTrace,
    survivors: &Survivors,
) -> OracleVerdict {
    let mut problems = Vec::new();
    if recovered.len() != initial.len() as u64 {
        return OracleVerdict::Violation(vec![Inconsistency::TableSize {
            expected: initial.len() as u64,
            found: recovered.len(),
        }]);
    }
    let analysis = TraceAnalysis::new(trace);
    let events = trace.before_crash();

    // Writers by SSN, for the checkpoint-covered part of R.
    let mut writer_ssn: HashMap<TxnId, Ssn> = HashMap::new();
    for e in events {
        if let Event::WriteApply { txn, ssn, .. } = e {
            writer_ssn.insert(*txn, *ssn);
        }
    }
    let in_r = |t: TxnId| {
        survivors.replayed.contains(&t)
            || (!survivors.rsns.is_zero()
                && writer_ssn.get(&t).is_some_and(|s| *s <= survivors.rsns))
    };

    for f in analysis.committed() {
        if writer_ssn.contains_key(&f.id) && !in_r(f.id) {
            problems.push(Inconsistency::LostCommit { txn: f.id });
        }
    }

    for e in &analysis.edges {
        if e.dependency != Dependency::ReadAfterWrite {
            continue;
        }
        let reader_counts = in_r(e.to) || analysis.txns.get(&e.to).is_some_and(|f| f.committed());
        if reader_counts && !in_r(e.from) {
            problems.push(Inconsistency::DanglingRead {
                reader: e.to,
                writer: e.from,
                key: e.key,
            });
        }
    }

    let mut expected: HashMap<Key, (Ssn, &[u8], TxnId)> = HashMap::new();
    for e in events {
        if let Event::WriteApply {
            txn,
            key,
            ssn,
            value,
        } = e
        {
            if in_r(*txn) {
                expected.insert(*key, (*ssn, value.as_slice(), *txn));
            }
        }
    }
    for (key, init) in initial.iter().enumerate() {
        let key = key as Key;
        let (ssn, value, writer) = match expected.get(&key) {
            Some((s, v, t)) => (*s, *v, Some(*t)),
            None => (init.ssn, init.value.as_slice(), None),
        };
        let got = recovered.get(key).expect("key within table");
        if got.ssn != ssn || got.value != value {
            problems.push(Inconsistency::WrongValue {
                key,
                expected_ssn: ssn,
                found_ssn: got.ssn,
                expected_writer: writer,
            });
        }
    }

    if problems.is_empty() {
        OracleVerdict::Pass
    } else {
        OracleVerdict::Violation(problems)
    }
}
