//! SSN properties measured on finished runs.

use std::collections::HashMap;

use crate::device::{log_file_name, Store};
use crate::record::scan_records;
use crate::types::{Key, Ssn, TxnId};
use crate::verify::trace::{Event, ExecutionTrace};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SsnProperties {
    /// Transactions that reached a commit queue.
    pub transactions: u64,
    /// Overwrites whose SSN did not exceed the version they replaced.
    pub waw_violations: u64,
    /// Record-bearing readers whose SSN did not exceed a version they read.
    pub raw_violations: u64,
    /// Adjacent records on one device whose SSNs did not increase.
    pub monotonic_violations: u64,
    /// Read-then-overwrite pairs where the overwriter's SSN equals the
    /// reader's; allowed, counted for information.
    pub war_ties: u64,
}

impl SsnProperties {
    pub fn clean(&self) -> bool {
        self.waw_violations == 0 && self.raw_violations == 0 && self.monotonic_violations == 0
    }

    pub fn add(&mut self, o: &SsnProperties) {
        self.transactions += o.transactions;
        self.waw_violations += o.waw_violations;
        self.raw_violations += o.raw_violations;
        self.monotonic_violations += o.monotonic_violations;
        self.war_ties += o.war_ties;
    }
}

/// Checks the trace and the device contents of `buffers` log streams.
pub fn ssn_properties(trace: &ExecutionTrace, store: &dyn Store, buffers: usize) -> SsnProperties {
    let events = trace.before_crash();
    let mut p = SsnProperties::default();
    let mut own: HashMap<TxnId, (Ssn, bool)> = HashMap::new();
    for e in events {
        if let Event::Enqueue {
            txn, ssn, class, ..
        } = e
        {
            p.transactions += 1;
            own.insert(*txn, (*ssn, class.has_record()));
        }
    }

    let mut last: HashMap<Key, (TxnId, Ssn)> = HashMap::new();
    // Per key, readers of the current version.
    let mut readers: HashMap<Key, Vec<TxnId>> = HashMap::new();
    for e in events {
        match e {
            Event::Read { txn, key, observed } => {
                if let Some((ssn, true)) = own.get(txn) {
                    if ssn <= observed && !observed.is_zero() {
                        p.raw_violations += 1;
                    }
                }
                readers.entry(*key).or_default().push(*txn);
            }
            Event::WriteApply { txn, key, ssn, .. } => {
                if let Some((prev, prev_ssn)) = last.get(key) {
                    if prev != txn && prev_ssn >= ssn {
                        p.waw_violations += 1;
                    }
                }
                for r in readers.remove(key).unwrap_or_default() {
                    if r != *txn && own.get(&r).is_some_and(|(s, _)| s == ssn) {
                        p.war_ties += 1;
                    }
                }
                last.insert(*key, (*txn, *ssn));
            }
            _ => {}
        }
    }

    for b in 0..buffers {
        let mut prev: Option<Ssn> = None;
        let mut seq = 0;
        while let Ok(bytes) = store.read(&log_file_name(b, seq)) {
            for r in scan_records(&bytes).records {
                if prev.is_some_and(|s| s >= r.ssn) {
                    p.monotonic_violations += 1;
                }
                prev = Some(r.ssn);
            }
            seq += 1;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MemStore;
    use crate::types::TxnClass;

    #[test]
    fn counts_each_kind() {
        let trace = ExecutionTrace::new(vec![
            Event::WriteApply {
                txn: TxnId(1),
                key: 0,
                ssn: Ssn(5),
                value: vec![],
            },
            Event::Enqueue {
                txn: TxnId(1),
                ssn: Ssn(5),
                class: TxnClass::WriteOnly,
                buffer: 0,
            },
            Event::Read {
                txn: TxnId(2),
                key: 0,
                observed: Ssn(5),
            },
            Event::WriteApply {
                txn: TxnId(2),
                key: 0,
                ssn: Ssn(4),
                value: vec![],
            },
            Event::Enqueue {
                txn: TxnId(2),
                ssn: Ssn(4),
                class: TxnClass::HasReads,
                buffer: 1,
            },
        ]);
        let p = ssn_properties(&trace, &MemStore::new(), 0);
        assert_eq!(p.transactions, 2);
        assert_eq!(p.waw_violations, 1);
        assert_eq!(p.raw_violations, 1);
        assert!(!p.clean());
    }
}
