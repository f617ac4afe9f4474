//! Hand-built crash scenarios over four transactions.
//!
//! `T1` writes `x`; `T2` reads `x` and `z` and writes `y` (read-after-write
//! on `T1`); `T3` overwrites `y` (write-after-write on `T2`); `T4`
//! overwrites `z` (write-after-read on `T2`). Each scenario fixes a commit
//! order, the SSNs of the records and what was durable at the crash:
//!
//! | case | pair    | commit order | SSN order | consistent |
//! |------|---------|--------------|-----------|------------|
//! | a    | T1, T2  | C1 < C2      | L1 < L2   | yes        |
//! | b    | T1, T2  | C1 < C2      | L1 > L2   | yes        |
//! | c    | T1, T2  | C2 < C1      | L1 < L2   | no         |
//! | d    | T2, T3  | C2 < C3      | L2 < L3   | yes        |
//! | e    | T2, T3  | C3 < C2      | L2 > L3   | no         |
//! | f    | T2, T3  | C3 < C2      | L2 < L3   | yes        |
//! | g    | T2, T4  | C2 < C4      | L2 < L4   | yes        |
//! | h    | T2, T4  | C4 < C2      | L4 < L2   | yes        |
//!
//! The module also holds the fixed ten-transaction program used for
//! exhaustive crash enumeration.

use crate::device::{log_file_name, MemStore, Store};
use crate::record::{LogEntry, LogRecord};
use crate::recovery::{self, RecoveryError};
use crate::txn::{Table, TupleData};
use crate::types::{Key, Ssn, TxnClass, TxnId};
use crate::verify::levels::{self, Verdict};
use crate::verify::oracle::{consistency_oracle, OracleVerdict, Survivors};
use crate::verify::sim::{Op, Program, TxnProgram};
use crate::verify::trace::{Event, ExecutionTrace};

use TxnClass::{HasReads, WriteOnly};

const X: Key = 0;
const Y: Key = 1;
const Z: Key = 2;
const KEYS: u64 = 3;
const A: usize = 0;
const B: usize = 1;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: char,
    pub summary: &'static str,
    pub trace: ExecutionTrace,
    /// Per buffer, the records durable at the crash.
    pub logs: Vec<Vec<LogRecord>>,
    /// Whether recovery can reach a consistent state.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub recoverability: Verdict,
    pub oracle: OracleVerdict,
}

impl ScenarioResult {
    pub fn consistent(&self) -> bool {
        self.recoverability.is_pass() && self.oracle.is_pass()
    }
}

fn value(txn: u64, key: Key) -> Vec<u8> {
    vec![(txn * 10 + key) as u8]
}

pub fn initial() -> Vec<TupleData> {
    (0..KEYS)
        .map(|k| TupleData {
            ssn: Ssn::ZERO,
            value: vec![100 + k as u8],
        })
        .collect()
}

/// Builds matching trace events and log records.
struct Script {
    events: Vec<Event>,
}

impl Script {
    fn new() -> Self {
        Script { events: Vec::new() }
    }

    fn read(mut self, txn: u64, key: Key, observed: u64) -> Self {
        self.events.push(Event::Read {
            txn: TxnId(txn),
            key,
            observed: Ssn(observed),
        });
        self
    }

    /// Applies the writes and enqueues the transaction.
    fn write(mut self, txn: u64, ssn: u64, class: TxnClass, buffer: usize, keys: &[Key]) -> Self {
        for &key in keys {
            self.events.push(Event::WriteApply {
                txn: TxnId(txn),
                key,
                ssn: Ssn(ssn),
                value: value(txn, key),
            });
        }
        self.events.push(Event::Enqueue {
            txn: TxnId(txn),
            ssn: Ssn(ssn),
            class,
            buffer,
        });
        self
    }

    fn durable(mut self, buffer: usize, dsn: u64) -> Self {
        self.events.push(Event::Durable {
            buffer,
            dsn: Ssn(dsn),
        });
        self
    }

    fn csn(mut self, csn: u64) -> Self {
        self.events.push(Event::Csn { csn: Ssn(csn) });
        self
    }

    fn commit(mut self, txn: u64, ssn: u64, class: TxnClass, buffer: usize) -> Self {
        self.events.push(Event::Commit {
            txn: TxnId(txn),
            ssn: Ssn(ssn),
            class,
            buffer,
        });
        self
    }

    fn crash(mut self) -> ExecutionTrace {
        self.events.push(Event::Crash);
        ExecutionTrace::new(self.events)
    }
}

fn rec(txn: u64, ssn: u64, write_only: bool, keys: &[Key]) -> LogRecord {
    LogRecord {
        ssn: Ssn(ssn),
        txn_id: TxnId(txn),
        write_only,
        entries: keys
            .iter()
            .map(|&key| LogEntry {
                key,
                value: value(txn, key),
            })
            .collect(),
    }
}

fn heartbeat(ssn: u64) -> LogRecord {
    LogRecord::heartbeat(Ssn(ssn))
}

pub fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: 'a',
            summary: "read-after-write, writer commits first with the smaller SSN",
            trace: Script::new()
                .write(1, 1, WriteOnly, A, &[X])
                .read(2, X, 1)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .durable(A, 1)
                .commit(1, 1, WriteOnly, A)
                .durable(B, 2)
                .durable(A, 2)
                .csn(2)
                .commit(2, 2, HasReads, B)
                .crash(),
            logs: vec![
                vec![rec(1, 1, true, &[X]), heartbeat(2)],
                vec![rec(2, 2, false, &[Y])],
            ],
            consistent: true,
        },
        Scenario {
            name: 'b',
            summary: "read-after-write, writer commits first with the larger SSN",
            trace: Script::new()
                .write(1, 3, WriteOnly, A, &[X])
                .read(2, X, 3)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .durable(A, 3)
                .commit(1, 3, WriteOnly, A)
                .durable(B, 2)
                .csn(2)
                .commit(2, 2, HasReads, B)
                .crash(),
            logs: vec![vec![rec(1, 3, true, &[X])], vec![rec(2, 2, false, &[Y])]],
            consistent: true,
        },
        Scenario {
            name: 'c',
            summary: "read-after-write, reader commits before the writer is durable",
            trace: Script::new()
                .write(1, 1, WriteOnly, A, &[X])
                .read(2, X, 1)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .durable(B, 2)
                .commit(2, 2, HasReads, B)
                .crash(),
            logs: vec![vec![], vec![rec(2, 2, false, &[Y])]],
            consistent: false,
        },
        Scenario {
            name: 'd',
            summary: "write-after-write, earlier writer commits first, SSNs follow",
            trace: Script::new()
                .read(2, X, 0)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .write(3, 3, WriteOnly, A, &[Y])
                .durable(B, 2)
                .durable(A, 2)
                .csn(2)
                .commit(2, 2, HasReads, B)
                .crash(),
            logs: vec![vec![heartbeat(2)], vec![rec(2, 2, false, &[Y])]],
            consistent: true,
        },
        Scenario {
            name: 'e',
            summary: "write-after-write, overwriter carries the smaller SSN",
            trace: Script::new()
                .read(2, X, 0)
                .read(2, Z, 0)
                .write(2, 5, HasReads, B, &[Y])
                .write(3, 3, WriteOnly, A, &[Y])
                .durable(A, 3)
                .commit(3, 3, WriteOnly, A)
                .durable(A, 5)
                .durable(B, 5)
                .csn(5)
                .commit(2, 5, HasReads, B)
                .crash(),
            logs: vec![
                vec![rec(3, 3, true, &[Y]), heartbeat(5)],
                vec![rec(2, 5, false, &[Y])],
            ],
            consistent: false,
        },
        Scenario {
            name: 'f',
            summary: "write-after-write, overwriter commits first, SSNs follow",
            trace: Script::new()
                .read(2, X, 0)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .write(3, 3, WriteOnly, A, &[Y])
                .durable(A, 3)
                .commit(3, 3, WriteOnly, A)
                .crash(),
            logs: vec![vec![rec(3, 3, true, &[Y])], vec![]],
            consistent: true,
        },
        Scenario {
            name: 'g',
            summary: "write-after-read, reader commits first with the smaller SSN",
            trace: Script::new()
                .read(2, X, 0)
                .read(2, Z, 0)
                .write(2, 2, HasReads, B, &[Y])
                .write(4, 3, WriteOnly, A, &[Z])
                .durable(B, 2)
                .durable(A, 2)
                .csn(2)
                .commit(2, 2, HasReads, B)
                .durable(A, 3)
                .commit(4, 3, WriteOnly, A)
                .crash(),
            logs: vec![
                vec![heartbeat(2), rec(4, 3, true, &[Z])],
                vec![rec(2, 2, false, &[Y])],
            ],
            consistent: true,
        },
        Scenario {
            name: 'h',
            summary: "write-after-read, overwriter commits first with the smaller SSN",
            trace: Script::new()
                .read(2, X, 0)
                .read(2, Z, 0)
                .write(2, 5, HasReads, B, &[Y])
                .write(4, 3, WriteOnly, A, &[Z])
                .durable(A, 3)
                .commit(4, 3, WriteOnly, A)
                .crash(),
            logs: vec![vec![rec(4, 3, true, &[Z])], vec![]],
            consistent: true,
        },
    ]
}

/// Writes the scenario's durable records, recovers and runs both checks.
pub fn evaluate(s: &Scenario) -> Result<ScenarioResult, RecoveryError> {
    let store = MemStore::new();
    for (buffer, records) in s.logs.iter().enumerate() {
        let bytes: Vec<u8> = records.iter().flat_map(LogRecord::encode).collect();
        store
            .write_atomic(&log_file_name(buffer, 0), &bytes)
            .map_err(|source| RecoveryError::Io {
                file: log_file_name(buffer, 0),
                source,
            })?;
    }
    let init = initial();
    let table = Table::from_values(init.iter().map(|t| t.value.clone()));
    let recovered = recovery::recover(&store, table, 2)?;
    let survivors = Survivors::from_recovery(&recovered.plan, &recovered.replay.replayed);
    Ok(ScenarioResult {
        recoverability: levels::check_recoverability(&s.trace),
        oracle: consistency_oracle(&recovered.table, &init, &s.trace, &survivors),
    })
}

/// Ten transactions on four workers (two per buffer) covering each
/// dependency shape: blind writes to the same key, reads of fresh writes,
/// reads followed by overwrites and a read-only reader.
pub fn boundary_program(value_len: usize) -> Program {
    let w = |k: Key, tag: u8| Op::Write(k, vec![tag; value_len]);
    let txn = |ops: Vec<Op>| TxnProgram { ops };
    Program {
        workers: vec![
            vec![
                txn(vec![w(0, 1)]),
                txn(vec![Op::Read(1), w(2, 5)]),
                txn(vec![w(0, 9)]),
            ],
            vec![
                txn(vec![Op::Read(0), w(1, 2)]),
                txn(vec![w(1, 6)]),
                txn(vec![Op::Read(2), Op::Read(0)]),
            ],
            vec![txn(vec![w(1, 3)]), txn(vec![Op::Read(3), w(0, 7)])],
            vec![txn(vec![Op::Read(2), w(3, 4)]), txn(vec![w(2, 8), w(3, 8)])],
        ],
    }
}
