//! Decentralized SSN allocation.
//!
//! A transaction's SSN is one more than the largest SSN among the tuples it
//! touched and the SSN of the log buffer that will hold its record. The
//! buffer part is updated under a short per-buffer latch together with the
//! slot offset, so SSN order and byte order inside one buffer agree.

use std::hint;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use crate::txn::{Table, Transaction, TxnError};
use crate::types::Ssn;
use crate::verify::trace::{Event, TraceRecorder};

const SPIN_LIMIT: u32 = 6;

/// Test-and-set spin latch with bounded exponential backoff.
#[derive(Debug, Default)]
pub struct SpinLatch {
    locked: AtomicBool,
}

impl SpinLatch {
    pub fn new() -> Self {
        SpinLatch::default()
    }

    pub fn try_acquire(&self) -> bool {
        self.locked
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
    }

    pub fn acquire(&self) {
        let mut step = 0u32;
        loop {
            if !self.locked.load(Ordering::Relaxed) && self.try_acquire() {
                return;
            }
            if step < SPIN_LIMIT {
                for _ in 0..(1u32 << step) {
                    hint::spin_loop();
                }
                step += 1;
            } else {
                thread::yield_now();
            }
        }
    }

    pub fn release(&self) {
        self.locked.store(false, Ordering::Release);
    }

    pub fn is_locked(&self) -> bool {
        self.locked.load(Ordering::Relaxed)
    }
}

/// Where a buffer takes new sequence numbers from.
#[derive(Debug, Clone)]
pub enum SsnSource {
    /// `max(base, buffer.ssn) + 1`.
    Scalable,
    /// One process-wide counter, the classic centralized LSN.
    Centralized(Arc<AtomicU64>),
}

/// Per-buffer allocation state: `ssn`, `offset` and the latch guarding both.
#[derive(Debug, Default)]
pub struct BufferSsnState {
    latch: SpinLatch,
    ssn: AtomicU64,
    offset: AtomicU64,
}

impl BufferSsnState {
    pub fn new() -> Self {
        BufferSsnState::default()
    }

    /// Takes the latch.
    pub fn lock(&self) -> SsnGuard<'_> {
        self.latch.acquire();
        SsnGuard { state: self }
    }

    pub fn try_lock(&self) -> Option<SsnGuard<'_>> {
        self.latch.try_acquire().then_some(SsnGuard { state: self })
    }

    /// Latest SSN handed out on this buffer (racy outside the latch).
    pub fn ssn(&self) -> Ssn {
        Ssn(self.ssn.load(Ordering::Acquire))
    }

    /// Logical offset of the next free byte (racy outside the latch).
    pub fn offset(&self) -> u64 {
        self.offset.load(Ordering::Acquire)
    }

    /// Re-seeds the buffer after recovery so new SSNs exceed all history.
    pub fn reseed(&self, floor: Ssn) {
        let guard = self.lock();
        guard.state.ssn.fetch_max(floor.0, Ordering::AcqRel);
    }
}

/// Holds the buffer latch; released on drop.
pub struct SsnGuard<'a> {
    state: &'a BufferSsnState,
}

impl SsnGuard<'_> {
    pub fn ssn(&self) -> Ssn {
        Ssn(self.state.ssn.load(Ordering::Relaxed))
    }

    pub fn offset(&self) -> u64 {
        self.state.offset.load(Ordering::Relaxed)
    }

    /// Moves the offset forward without allocating (ring wrap gap).
    pub fn skip_to(&mut self, offset: u64) {
        debug_assert!(offset >= self.offset());
        self.state.offset.store(offset, Ordering::Relaxed);
    }

    /// Assigns the next SSN and reserves `len` bytes at the current offset.
    pub fn allocate(&mut self, base: Ssn, len: u64, source: &SsnSource) -> (Ssn, u64) {
        let ssn = match source {
            SsnSource::Scalable => next_ssn(base, self.ssn()),
            SsnSource::Centralized(counter) => Ssn(counter.fetch_add(1, Ordering::AcqRel) + 1),
        };
        self.state.ssn.store(ssn.0, Ordering::Relaxed);
        let offset = self.state.offset.fetch_add(len, Ordering::Relaxed);
        (ssn, offset)
    }
}

impl Drop for SsnGuard<'_> {
    fn drop(&mut self) {
        // Release ordering publishes the ssn/offset stores before the latch
        // opens.
        self.state.latch.release();
    }
}

/// Largest tuple SSN over the read and write sets; zero when both are empty.
pub fn compute_base<R, W>(reads: R, writes: W) -> Ssn
where
    R: IntoIterator<Item = Ssn>,
    W: IntoIterator<Item = Ssn>,
{
    reads
        .into_iter()
        .chain(writes)
        .fold(Ssn::ZERO, |base, ssn| base.max(ssn))
}

#[inline]
pub fn next_ssn(base: Ssn, buffer_ssn: Ssn) -> Ssn {
    base.max(buffer_ssn).next()
}

/// A read-only transaction takes `base` as its SSN and touches no buffer.
pub fn allocate_readonly_ssn(txn: &mut Transaction, base: Ssn) -> Ssn {
    debug_assert!(txn.write_set.is_empty());
    txn.ssn = base;
    base
}

/// Installs every write-set value stamped with `txn.ssn`. The caller holds
/// the write locks.
pub fn stamp_write_set(
    table: &Table,
    txn: &Transaction,
    trace: Option<&TraceRecorder>,
) -> Result<(), TxnError> {
    debug_assert!(!txn.ssn.is_zero());
    for (key, value) in &txn.write_set {
        let tuple = table.tuple(*key)?;
        let mut data = tuple.data.lock();
        data.ssn = txn.ssn;
        data.value.clone_from(value);
        if let Some(trace) = trace {
            trace.record(Event::WriteApply {
                txn: txn.id,
                key: *key,
                ssn: txn.ssn,
                value: value.clone(),
            });
        }
    }
    Ok(())
}
