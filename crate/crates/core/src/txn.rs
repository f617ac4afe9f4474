//! In-memory table and the optimistic concurrency control phases.
//!
//! Reads are lock-free snapshots of `(ssn, value)`. Validation locks the
//! write set in ascending key order, then checks that every read-set tuple
//! is unlocked by others and still carries the SSN that was read. The write
//! phase (SSN allocation, stamping and early lock release) lives in
//! [`crate::engine::Worker::precommit`].

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Instant;

use parking_lot::Mutex;
use thiserror::Error;

use crate::types::{Key, Ssn, TxnClass, TxnId, TxnState};
use crate::verify::trace::{Event, TraceRecorder};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("key {0} not found")]
    KeyNotFound(Key),
    #[error(
        "cannot allocate {records} records of {value_len} B; reduce --records or the value size"
    )]
    OutOfMemory { records: u64, value_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TupleData {
    pub ssn: Ssn,
    pub value: Vec<u8>,
}

/// One row: an OCC lock word and the stamped value.
#[derive(Debug, Default)]
pub struct Tuple {
    lock: AtomicU64,
    pub(crate) data: Mutex<TupleData>,
}

impl Tuple {
    pub fn new(value: Vec<u8>) -> Self {
        Tuple {
            lock: AtomicU64::new(0),
            data: Mutex::new(TupleData {
                ssn: Ssn::ZERO,
                value,
            }),
        }
    }

    pub fn try_lock(&self, owner: TxnId) -> bool {
        self.lock
            .compare_exchange(0, owner.0, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
    }

    pub fn lock_spin(&self, owner: TxnId) {
        let mut spins = 0u32;
        while !self.try_lock(owner) {
            spins += 1;
            if spins < 32 {
                std::hint::spin_loop();
            } else {
                thread::yield_now();
            }
        }
    }

    pub fn unlock(&self, owner: TxnId) {
        let prev = self.lock.swap(0, Ordering::Release);
        debug_assert_eq!(prev, owner.0, "unlock by non-holder");
    }

    pub fn holder(&self) -> Option<TxnId> {
        match self.lock.load(Ordering::Acquire) {
            0 => None,
            id => Some(TxnId(id)),
        }
    }

    pub fn snapshot(&self) -> TupleData {
        self.data.lock().clone()
    }

    pub fn ssn(&self) -> Ssn {
        self.data.lock().ssn
    }

    /// Lock word and SSN read as a consistent pair.
    fn header_pair(&self) -> (Option<TxnId>, Ssn) {
        loop {
            let before = self.lock.load(Ordering::Acquire);
            let ssn = self.data.lock().ssn;
            if self.lock.load(Ordering::Acquire) == before {
                return ((before != 0).then_some(TxnId(before)), ssn);
            }
            std::hint::spin_loop();
        }
    }
}

/// Fixed, pre-populated key space `0..len`.
#[derive(Debug)]
pub struct Table {
    tuples: Box<[Tuple]>,
}

impl Table {
    pub fn from_values<I>(values: I) -> Table
    where
        I: IntoIterator<Item = Vec<u8>>,
    {
        Table {
            tuples: values.into_iter().map(Tuple::new).collect(),
        }
    }

    /// Builds `records` tuples with `value(key)` as initial contents.
    pub fn load<F>(records: u64, value_len: usize, mut value: F) -> Result<Table, TxnError>
    where
        F: FnMut(Key) -> Vec<u8>,
    {
        let oom = TxnError::OutOfMemory { records, value_len };
        let n = usize::try_from(records).map_err(|_| oom.clone())?;
        let mut tuples: Vec<Tuple> = Vec::new();
        tuples.try_reserve_exact(n).map_err(|_| oom.clone())?;
        for key in 0..records {
            let mut v = Vec::new();
            v.try_reserve_exact(value_len).map_err(|_| oom.clone())?;
            v.extend_from_slice(&value(key));
            tuples.push(Tuple::new(v));
        }
        Ok(Table {
            tuples: tuples.into_boxed_slice(),
        })
    }

    pub fn len(&self) -> u64 {
        self.tuples.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuple(&self, key: Key) -> Result<&Tuple, TxnError> {
        usize::try_from(key)
            .ok()
            .and_then(|i| self.tuples.get(i))
            .ok_or(TxnError::KeyNotFound(key))
    }

    pub fn get(&self, key: Key) -> Result<TupleData, TxnError> {
        Ok(self.tuple(key)?.snapshot())
    }

    /// Overwrites a tuple unconditionally (recovery loading).
    pub fn install(&self, key: Key, ssn: Ssn, value: Vec<u8>) -> Result<(), TxnError> {
        let tuple = self.tuple(key)?;
        *tuple.data.lock() = TupleData { ssn, value };
        Ok(())
    }

    /// Applies `value` only if `ssn` is newer than the tuple's current SSN
    /// (last writer wins). Returns whether it applied.
    pub fn apply_if_newer(&self, key: Key, ssn: Ssn, value: &[u8]) -> Result<bool, TxnError> {
        let tuple = self.tuple(key)?;
        let mut data = tuple.data.lock();
        if ssn > data.ssn {
            data.ssn = ssn;
            data.value.clear();
            data.value.extend_from_slice(value);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn snapshot(&self) -> Vec<TupleData> {
        self.tuples.iter().map(Tuple::snapshot).collect()
    }

    pub fn max_ssn(&self) -> Ssn {
        self.tuples
            .iter()
            .map(Tuple::ssn)
            .max()
            .unwrap_or(Ssn::ZERO)
    }

    /// Deep copy; tuples must not be locked.
    pub fn duplicate(&self) -> Table {
        Table {
            tuples: self
                .tuples
                .iter()
                .map(|t| {
                    let d = t.snapshot();
                    Tuple {
                        lock: AtomicU64::new(0),
                        data: Mutex::new(d),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transaction {
    pub id: TxnId,
    /// Key to the SSN observed when it was first read.
    pub read_set: BTreeMap<Key, Ssn>,
    pub write_set: BTreeMap<Key, Vec<u8>>,
    pub ssn: Ssn,
    pub buffer_id: usize,
    pub state: TxnState,
    pub began_at: Instant,
    locked: Vec<Key>,
}

impl Transaction {
    pub fn begin(id: TxnId, buffer_id: usize) -> Transaction {
        Transaction {
            id,
            read_set: BTreeMap::new(),
            write_set: BTreeMap::new(),
            ssn: Ssn::ZERO,
            buffer_id,
            state: TxnState::Active,
            began_at: Instant::now(),
            locked: Vec::new(),
        }
    }

    pub fn class(&self) -> TxnClass {
        TxnClass::classify(self.read_set.len(), self.write_set.len())
    }

    pub fn holds_locks(&self) -> bool {
        !self.locked.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    /// A read-set tuple was restamped after it was read.
    StaleRead(Key),
    /// A read-set tuple is locked by another validating transaction.
    LockedByOther(Key),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Ok,
    Abort(AbortReason),
    /// A write lock was busy; nothing is held, retry later.
    WouldBlock,
}

pub fn read(
    table: &Table,
    txn: &mut Transaction,
    key: Key,
    trace: Option<&TraceRecorder>,
) -> Result<Vec<u8>, TxnError> {
    debug_assert_eq!(txn.state, TxnState::Active);
    if let Some(pending) = txn.write_set.get(&key) {
        return Ok(pending.clone());
    }
    let tuple = table.tuple(key)?;
    // The event is recorded under the tuple mutex so the trace orders it
    // against the write that produced the version.
    let data = tuple.data.lock();
    if let Entry::Vacant(slot) = txn.read_set.entry(key) {
        slot.insert(data.ssn);
        if let Some(trace) = trace {
            trace.record(Event::Read {
                txn: txn.id,
                key,
                observed: data.ssn,
            });
        }
    }
    Ok(data.value.clone())
}

pub fn write(
    table: &Table,
    txn: &mut Transaction,
    key: Key,
    value: Vec<u8>,
) -> Result<(), TxnError> {
    debug_assert_eq!(txn.state, TxnState::Active);
    table.tuple(key)?;
    txn.write_set.insert(key, value);
    Ok(())
}

/// Ordered range read of up to `len` keys starting at `start`.
pub fn scan(
    table: &Table,
    txn: &mut Transaction,
    start: Key,
    len: u64,
    trace: Option<&TraceRecorder>,
) -> Result<Vec<(Key, Vec<u8>)>, TxnError> {
    table.tuple(start)?;
    let end = start.saturating_add(len).min(table.len());
    (start..end)
        .map(|key| read(table, txn, key, trace).map(|v| (key, v)))
        .collect()
}

/// Validation that waits for busy write locks (ascending key order keeps
/// this deadlock free).
pub fn validate(table: &Table, txn: &mut Transaction) -> Validation {
    debug_assert_eq!(txn.state, TxnState::Active);
    for key in txn.write_set.keys() {
        // Keys were checked by `write`.
        let tuple = table.tuple(*key).expect("write-set key exists");
        tuple.lock_spin(txn.id);
        txn.locked.push(*key);
    }
    check_reads(table, txn)
}

/// Like [`validate`], but calls `keep_waiting` while a lock is busy; when it
/// returns false every acquired lock is released and the result is
/// `WouldBlock`.
pub fn validate_with(
    table: &Table,
    txn: &mut Transaction,
    mut keep_waiting: impl FnMut() -> bool,
) -> Validation {
    debug_assert_eq!(txn.state, TxnState::Active);
    let keys: Vec<Key> = txn.write_set.keys().copied().collect();
    for key in keys {
        let tuple = table.tuple(key).expect("write-set key exists");
        while !tuple.try_lock(txn.id) {
            if !keep_waiting() {
                release_locks(table, txn);
                return Validation::WouldBlock;
            }
        }
        txn.locked.push(key);
    }
    check_reads(table, txn)
}

/// Validation that never waits; on a busy lock it backs out completely.
pub fn try_validate(table: &Table, txn: &mut Transaction) -> Validation {
    debug_assert_eq!(txn.state, TxnState::Active);
    for key in txn.write_set.keys() {
        let tuple = table.tuple(*key).expect("write-set key exists");
        if !tuple.try_lock(txn.id) {
            release_locks(table, txn);
            return Validation::WouldBlock;
        }
        txn.locked.push(*key);
    }
    check_reads(table, txn)
}

fn check_reads(table: &Table, txn: &mut Transaction) -> Validation {
    for (key, seen) in &txn.read_set {
        let tuple = table.tuple(*key).expect("read-set key exists");
        let (holder, ssn) = tuple.header_pair();
        let reason = if holder.is_some_and(|h| h != txn.id) {
            Some(AbortReason::LockedByOther(*key))
        } else if ssn != *seen {
            Some(AbortReason::StaleRead(*key))
        } else {
            None
        };
        if let Some(reason) = reason {
            abort(table, txn);
            return Validation::Abort(reason);
        }
    }
    txn.state = TxnState::Validated;
    Validation::Ok
}

pub fn release_locks(table: &Table, txn: &mut Transaction) {
    for key in txn.locked.drain(..) {
        table.tuple(key).expect("locked key exists").unlock(txn.id);
    }
}

pub fn abort(table: &Table, txn: &mut Transaction) {
    release_locks(table, txn);
    txn.state = TxnState::Aborted;
}
