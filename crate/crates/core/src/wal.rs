//! Log buffers, the segment index and DSN advancement.
//!
//! Workers reserve space in a buffer under its latch, copy their record
//! outside the latch and then bump the covering segment's `buffered_bytes`.
//! A segment is flushable once it is closed and every reserved byte has
//! been copied; the logger flushes segments strictly in ring order, so the
//! durable part of a buffer is always a prefix and the buffer's DSN is the
//! SSN of the last record in that prefix.

use std::cell::UnsafeCell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use thiserror::Error;

use crate::device::{Device, DeviceError};
use crate::invariants::{self, Check};
use crate::sequence::{BufferSsnState, SsnGuard, SsnSource};
use crate::types::Ssn;
use crate::verify::trace::{Event, TraceRecorder};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ReserveError {
    /// Not enough free space (or no free segment); wait for the logger.
    #[error("log buffer full")]
    BufferFull,
    #[error("record of {len} B exceeds buffer capacity {capacity} B")]
    RecordTooLarge { len: usize, capacity: usize },
}

/// Fixed-size byte ring shared by workers (copying disjoint slots) and the
/// logger (reading completed segments).
struct RingBytes {
    data: Box<[UnsafeCell<u8>]>,
}

// SAFETY: all access goes through `slot_mut` and `slice`, whose callers
// guarantee that concurrent accesses touch disjoint byte ranges.
unsafe impl Sync for RingBytes {}

impl RingBytes {
    fn new(len: usize) -> Self {
        RingBytes {
            data: (0..len).map(|_| UnsafeCell::new(0)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    /// # Safety
    ///
    /// `[pos, pos + len)` must lie in the ring and no other reference to
    /// those bytes may exist while the returned slice lives.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slot_mut(&self, pos: usize, len: usize) -> &mut [u8] {
        assert!(pos + len <= self.len());
        let base = UnsafeCell::raw_get(self.data.as_ptr().add(pos));
        std::slice::from_raw_parts_mut(base, len)
    }

    /// # Safety
    ///
    /// `[pos, pos + len)` must lie in the ring and nobody may write those
    /// bytes while the returned slice lives.
    unsafe fn slice(&self, pos: usize, len: usize) -> &[u8] {
        assert!(pos + len <= self.len());
        let base = UnsafeCell::raw_get(self.data.as_ptr().add(pos));
        std::slice::from_raw_parts(base, len)
    }
}

/// One hole-tracking unit: `<ssn, allocated_bytes, buffered_bytes,
/// start_offset, stat>`.
#[derive(Debug, Default)]
pub struct Segment {
    ssn: AtomicU64,
    allocated: AtomicU64,
    buffered: AtomicU64,
    start: AtomicU64,
    closed: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentView {
    pub ssn: Ssn,
    pub allocated_bytes: u64,
    pub buffered_bytes: u64,
    pub start_offset: u64,
    pub closed: bool,
}

impl Segment {
    pub fn view(&self) -> SegmentView {
        SegmentView {
            ssn: Ssn(self.ssn.load(Ordering::Acquire)),
            allocated_bytes: self.allocated.load(Ordering::Acquire),
            buffered_bytes: self.buffered.load(Ordering::Acquire),
            start_offset: self.start.load(Ordering::Acquire),
            closed: self.closed.load(Ordering::Acquire),
        }
    }

    fn is_empty(&self) -> bool {
        self.allocated.load(Ordering::Relaxed) == 0
    }

    fn reset(&self) {
        self.ssn.store(0, Ordering::Relaxed);
        self.allocated.store(0, Ordering::Relaxed);
        self.buffered.store(0, Ordering::Relaxed);
        self.closed.store(false, Ordering::Release);
    }
}

/// Ring of segments with generate and flush cursors.
#[derive(Debug)]
pub struct SegmentIndex {
    segments: Box<[Segment]>,
    cur_generate: AtomicU64,
    cur_flush: AtomicU64,
}

impl SegmentIndex {
    pub fn new(ring: usize) -> Self {
        SegmentIndex {
            segments: (0..ring).map(|_| Segment::default()).collect(),
            cur_generate: AtomicU64::new(0),
            cur_flush: AtomicU64::new(0),
        }
    }

    pub fn ring(&self) -> u64 {
        self.segments.len() as u64
    }

    pub fn slot(&self, seg: u64) -> &Segment {
        &self.segments[(seg % self.ring()) as usize]
    }

    pub fn cur_generate(&self) -> u64 {
        self.cur_generate.load(Ordering::Acquire)
    }

    pub fn cur_flush(&self) -> u64 {
        self.cur_flush.load(Ordering::Acquire)
    }
}

/// A reserved, not yet filled, slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reservation {
    pub ssn: Ssn,
    /// Logical offset; the physical position is `offset % capacity`.
    pub offset: u64,
    pub len: usize,
    pub segment: u64,
}

/// Why a segment was closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseTrigger {
    SizeReached,
    TimerExpired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushOutcome {
    pub bytes: u64,
    pub dsn: Ssn,
}

pub struct LogBuffer {
    id: usize,
    capacity: u64,
    io_unit: u64,
    ring: RingBytes,
    seq: BufferSsnState,
    index: SegmentIndex,
    dsn: AtomicU64,
    flushed_offset: AtomicU64,
    source: SsnSource,
}

impl fmt::Debug for LogBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogBuffer")
            .field("id", &self.id)
            .field("capacity", &self.capacity)
            .field("ssn", &self.seq.ssn())
            .field("offset", &self.seq.offset())
            .field("dsn", &self.dsn())
            .field("cur_generate", &self.index.cur_generate())
            .field("cur_flush", &self.index.cur_flush())
            .finish()
    }
}

impl LogBuffer {
    pub fn new(id: usize, capacity: usize, io_unit: usize, ring: usize, source: SsnSource) -> Self {
        assert!(ring >= 2 && io_unit > 0 && io_unit * ring <= capacity);
        LogBuffer {
            id,
            capacity: capacity as u64,
            io_unit: io_unit as u64,
            ring: RingBytes::new(capacity),
            seq: BufferSsnState::new(),
            index: SegmentIndex::new(ring),
            dsn: AtomicU64::new(0),
            flushed_offset: AtomicU64::new(0),
            source,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity as usize
    }

    pub fn ssn(&self) -> Ssn {
        self.seq.ssn()
    }

    pub fn offset(&self) -> u64 {
        self.seq.offset()
    }

    pub fn dsn(&self) -> Ssn {
        Ssn(self.dsn.load(Ordering::Acquire))
    }

    pub fn index(&self) -> &SegmentIndex {
        &self.index
    }

    pub fn flushed_offset(&self) -> u64 {
        self.flushed_offset.load(Ordering::Acquire)
    }

    /// Reserved bytes not yet flushed.
    pub fn pending_bytes(&self) -> u64 {
        self.offset().saturating_sub(self.flushed_offset())
    }

    /// Makes every future SSN on this buffer exceed `floor`; the DSN starts
    /// at `floor` too since nothing below it can still be in flight.
    pub fn reseed(&self, floor: Ssn) {
        self.seq.reseed(floor);
        self.dsn.fetch_max(floor.0, Ordering::AcqRel);
    }

    /// Reserves `len` bytes and assigns the record's SSN from `base`.
    pub fn reserve(&self, base: Ssn, len: usize) -> Result<Reservation, ReserveError> {
        if len > self.capacity as usize || len == 0 {
            return Err(ReserveError::RecordTooLarge {
                len,
                capacity: self.capacity as usize,
            });
        }
        let len64 = len as u64;
        let mut g = self.seq.lock();
        let mut gen = self.index.cur_generate.load(Ordering::Relaxed);

        // An earlier size-triggered close may have found the ring full.
        if self.index.slot(gen).allocated.load(Ordering::Relaxed) >= self.io_unit
            && self.try_close(&g, gen)
        {
            gen += 1;
        }
        // Oversized records get a segment of their own.
        if len64 > self.io_unit && !self.index.slot(gen).is_empty() {
            if !self.try_close(&g, gen) {
                return Err(ReserveError::BufferFull);
            }
            gen += 1;
        }
        // A record never wraps: skip to the ring start.
        let pos = g.offset() % self.capacity;
        let at = if pos + len64 > self.capacity {
            g.offset() + (self.capacity - pos)
        } else {
            g.offset()
        };
        // A segment never spans the ring end either, which also covers a
        // segment that ended exactly on it.
        let seg = self.index.slot(gen);
        if !seg.is_empty()
            && seg.start.load(Ordering::Relaxed) / self.capacity != at / self.capacity
        {
            if !self.try_close(&g, gen) {
                return Err(ReserveError::BufferFull);
            }
            gen += 1;
        }
        if at != g.offset() {
            if at + len64 - self.flushed_offset() > self.capacity {
                return Err(ReserveError::BufferFull);
            }
            g.skip_to(at);
        }
        if self.index.slot(gen).is_empty() {
            self.index.slot(gen).start.store(at, Ordering::Relaxed);
        }
        if g.offset() + len64 - self.flushed_offset() > self.capacity {
            return Err(ReserveError::BufferFull);
        }

        let (ssn, offset) = g.allocate(base, len64, &self.source);
        let seg = self.index.slot(gen);
        let allocated = seg.allocated.fetch_add(len64, Ordering::AcqRel) + len64;
        if allocated >= self.io_unit {
            // If the ring is full the segment just keeps growing until the
            // logger frees a slot.
            self.try_close(&g, gen);
        }
        Ok(Reservation {
            ssn,
            offset,
            len,
            segment: gen,
        })
    }

    /// Copies a record into its reserved slot and marks it buffered.
    pub fn fill(&self, slot: &Reservation, write: impl FnOnce(&mut [u8])) {
        let pos = (slot.offset % self.capacity) as usize;
        // SAFETY: the slot was handed out once by `reserve`, lies inside the
        // ring without wrapping, and the logger does not read it before
        // `buffered` accounts for it below.
        let bytes = unsafe { self.ring.slot_mut(pos, slot.len) };
        write(bytes);
        self.index
            .slot(slot.segment)
            .buffered
            .fetch_add(slot.len as u64, Ordering::AcqRel);
    }

    /// Closes the generating segment under the latch; false when the ring
    /// has no free slot.
    fn try_close(&self, g: &SsnGuard<'_>, gen: u64) -> bool {
        let flush = self.index.cur_flush.load(Ordering::Acquire);
        if gen + 1 >= flush + self.index.ring() {
            return false;
        }
        let seg = self.index.slot(gen);
        seg.ssn.store(g.ssn().0, Ordering::Relaxed);
        seg.closed.store(true, Ordering::Release);
        self.index
            .slot(gen + 1)
            .start
            .store(g.offset(), Ordering::Relaxed);
        self.index.cur_generate.store(gen + 1, Ordering::Release);
        true
    }

    /// Closes the generating segment if it holds anything. Returns whether
    /// a segment was closed.
    pub fn establish(&self, trigger: CloseTrigger) -> bool {
        let g = self.seq.lock();
        let gen = self.index.cur_generate.load(Ordering::Relaxed);
        let seg = self.index.slot(gen);
        let due = match trigger {
            CloseTrigger::SizeReached => seg.allocated.load(Ordering::Relaxed) >= self.io_unit,
            CloseTrigger::TimerExpired => !seg.is_empty(),
        };
        due && self.try_close(&g, gen)
    }

    /// Whether the segment at the flush cursor is closed and has no holes.
    pub fn flush_ready(&self) -> bool {
        let cur = self.index.cur_flush.load(Ordering::Acquire);
        if cur >= self.index.cur_generate() {
            return false;
        }
        let view = self.index.slot(cur).view();
        view.closed && view.allocated_bytes == view.buffered_bytes
    }

    /// Flushes the segment at the flush cursor if it is closed and has no
    /// holes. The caller is the buffer's only logger.
    pub fn flush_one(
        &self,
        device: &mut Device,
        trace: Option<&TraceRecorder>,
    ) -> Result<Option<FlushOutcome>, DeviceError> {
        let cur = self.index.cur_flush.load(Ordering::Acquire);
        if cur >= self.index.cur_generate() {
            return Ok(None);
        }
        let seg = self.index.slot(cur);
        let view = seg.view();
        if !view.closed || view.allocated_bytes != view.buffered_bytes {
            return Ok(None);
        }
        invariants::check(
            view.closed && view.allocated_bytes == view.buffered_bytes,
            Check::FlushGate,
            || format!("buffer {} segment {cur}: {view:?}", self.id),
        );
        let pos = (view.start_offset % self.capacity) as usize;
        let len = view.allocated_bytes as usize;
        if len > 0 {
            // SAFETY: every byte of the segment was reserved and filled
            // (allocated == buffered), and space is not reused before
            // `flushed_offset` moves past it below.
            let bytes = unsafe { self.ring.slice(pos, len) };
            device.append_and_sync(bytes)?;
        }
        let dsn = self.publish_dsn(view.ssn, trace);
        self.flushed_offset
            .store(view.start_offset + view.allocated_bytes, Ordering::Release);
        // The slot must be clean before the cursor lets a worker reuse it.
        seg.reset();
        self.index.cur_flush.store(cur + 1, Ordering::Release);
        Ok(Some(FlushOutcome {
            bytes: view.allocated_bytes,
            dsn,
        }))
    }

    /// Flushes every ready segment in ring order.
    pub fn advance_dsn(
        &self,
        device: &mut Device,
        trace: Option<&TraceRecorder>,
    ) -> Result<u64, DeviceError> {
        let mut bytes = 0;
        while let Some(out) = self.flush_one(device, trace)? {
            bytes += out.bytes;
        }
        Ok(bytes)
    }

    fn publish_dsn(&self, ssn: Ssn, trace: Option<&TraceRecorder>) -> Ssn {
        let store = || {
            let prev = self.dsn.fetch_max(ssn.0, Ordering::AcqRel);
            invariants::check(prev <= ssn.0, Check::DsnRegressed, || {
                format!("buffer {} dsn {prev} -> {ssn}", self.id)
            });
            let event = (prev < ssn.0).then_some(Event::Durable {
                buffer: self.id,
                dsn: ssn,
            });
            (event, Ssn(prev.max(ssn.0)))
        };
        match trace {
            Some(t) => t.publish(store),
            None => store().1,
        }
    }
}
