//! The three-stage transaction pipeline.
//!
//! *Prepare*: a [`Worker`] runs the OCC read and validation phases, takes
//! an SSN and a slot in its mapped log buffer, installs its writes, releases
//! its locks early and copies its record into the slot. *Persistence*: one
//! [`Logger`] per buffer closes segments on size or timer and flushes them to
//! the buffer's device, advancing the DSN and then the CSN. *Commit*: the
//! worker pops whatever its queues now admit.
//!
//! Every stage is exposed as a non-blocking step as well, so a
//! deterministic scheduler can interleave workers and loggers on one thread.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

use crate::commit::{CommitCoordinator, CommitQueues, CommitRule, Committed, Pending};
use crate::device::{CrashSwitch, Device, DeviceError, DeviceModel, DeviceStats, Store};
use crate::record::{self, encode_parts, LogRecord};
use crate::sequence::{self, SsnSource};
use crate::txn::{self, Table, Transaction, TxnError, Validation};
use crate::types::{Config, ConfigError, Key, Ssn, TxnClass, TxnId, TxnState};
use crate::verify::trace::{Event, TraceRecorder};
use crate::wal::{CloseTrigger, LogBuffer, Reservation, ReserveError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error(transparent)]
    Reserve(#[from] ReserveError),
    #[error("engine halted")]
    Halted,
}

/// Where SSNs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SequencePolicy {
    /// Decentralized SSNs: one latch per buffer.
    #[default]
    Scalable,
    /// One global counter and total-order commit; single buffer only.
    Centralized,
}

/// Deliberate protocol violations used to test the crash oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultMode {
    #[default]
    None,
    /// Acknowledge commits without waiting for durability.
    SkipDurabilityWait,
    /// Compute the SSN base from the read set only, so blind overwrites can
    /// get SSNs below the version they replace.
    SkipWawTracking,
}

#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    pub policy: SequencePolicy,
    pub fault: FaultMode,
    /// `None` writes at full speed.
    pub device_model: Option<DeviceModel>,
    pub crash: Option<Arc<CrashSwitch>>,
    pub trace: Option<Arc<TraceRecorder>>,
    /// Every new SSN exceeds this (set after recovery).
    pub ssn_floor: Ssn,
}

#[derive(Debug)]
struct Shared {
    config: Config,
    table: Table,
    buffers: Vec<Arc<LogBuffer>>,
    devices: Vec<Mutex<Device>>,
    coordinator: CommitCoordinator,
    trace: Option<Arc<TraceRecorder>>,
    fault: FaultMode,
    crash: Arc<CrashSwitch>,
    store: Arc<dyn Store>,
    halted: AtomicBool,
    stop: AtomicBool,
    ssn_floor: AtomicU64,
    failure: Mutex<Option<String>>,
}

impl Shared {
    fn trace(&self) -> Option<&TraceRecorder> {
        self.trace.as_deref()
    }

    fn halt(&self, why: Option<String>) {
        if let Some(why) = why {
            self.failure.lock().get_or_insert(why);
        }
        self.crash.trip();
        self.halted.store(true, Ordering::Release);
        if let Some(t) = self.trace() {
            t.crash();
        }
    }

    fn is_halted(&self) -> bool {
        self.halted.load(Ordering::Acquire)
    }
}

pub struct Engine {
    shared: Arc<Shared>,
    loggers: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("buffers", &self.shared.buffers)
            .field("csn", &self.csn())
            .finish()
    }
}

impl Engine {
    pub fn open(
        config: Config,
        table: Table,
        store: Arc<dyn Store>,
        options: EngineOptions,
    ) -> Result<Engine, EngineError> {
        config.validate()?;
        if options.policy == SequencePolicy::Centralized && config.num_buffers != 1 {
            return Err(ConfigError::Invalid(
                "centralized logging uses exactly one buffer and one device".into(),
            )
            .into());
        }
        let source = match options.policy {
            SequencePolicy::Scalable => SsnSource::Scalable,
            SequencePolicy::Centralized => {
                SsnSource::Centralized(Arc::new(AtomicU64::new(options.ssn_floor.0)))
            }
        };
        let crash = options
            .crash
            .unwrap_or_else(|| Arc::new(CrashSwitch::disarmed()));
        let buffers: Vec<Arc<LogBuffer>> = (0..config.num_buffers)
            .map(|id| {
                let buf = LogBuffer::new(
                    id,
                    config.buffer_capacity,
                    config.io_unit_size,
                    config.segment_ring_size,
                    source.clone(),
                );
                buf.reseed(options.ssn_floor);
                Arc::new(buf)
            })
            .collect();
        let devices = (0..config.num_buffers)
            .map(|id| {
                Device::open(
                    id,
                    store.clone(),
                    config.log_file_rotate_bytes,
                    options.device_model,
                    crash.clone(),
                )
                .map(Mutex::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rule = match (options.fault, options.policy) {
            (FaultMode::SkipDurabilityWait, _) => CommitRule::Unchecked,
            (_, SequencePolicy::Centralized) => CommitRule::TotalOrder,
            _ => CommitRule::Partial,
        };
        let coordinator = CommitCoordinator::new(buffers.clone(), rule);
        coordinator.advance_csn(None);
        Ok(Engine {
            shared: Arc::new(Shared {
                config,
                table,
                buffers,
                devices,
                coordinator,
                trace: options.trace,
                fault: options.fault,
                crash,
                store,
                halted: AtomicBool::new(false),
                stop: AtomicBool::new(false),
                ssn_floor: AtomicU64::new(0),
                failure: Mutex::new(None),
            }),
            loggers: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.shared.config
    }

    pub fn table(&self) -> &Table {
        &self.shared.table
    }

    pub fn store(&self) -> Arc<dyn Store> {
        self.shared.store.clone()
    }

    pub fn num_buffers(&self) -> usize {
        self.shared.buffers.len()
    }

    pub fn buffer(&self, id: usize) -> &LogBuffer {
        &self.shared.buffers[id]
    }

    pub fn csn(&self) -> Ssn {
        self.shared.coordinator.csn()
    }

    pub fn dsn(&self, buffer: usize) -> Ssn {
        self.shared.buffers[buffer].dsn()
    }

    pub fn trace(&self) -> Option<&Arc<TraceRecorder>> {
        self.shared.trace.as_ref()
    }

    pub fn device_stats(&self) -> Vec<DeviceStats> {
        self.shared
            .devices
            .iter()
            .map(|d| d.lock().stats())
            .collect()
    }

    /// Asks loggers to push every buffer's DSN to at least `ssn`, even when
    /// the buffer is idle.
    pub fn request_ssn_floor(&self, ssn: Ssn) {
        self.shared.ssn_floor.fetch_max(ssn.0, Ordering::AcqRel);
    }

    /// Stops everything; only device contents survive.
    pub fn halt(&self) {
        self.shared.halt(None);
    }

    pub fn is_halted(&self) -> bool {
        self.shared.is_halted()
    }

    /// Why the engine halted on its own, if it did.
    pub fn failure(&self) -> Option<String> {
        self.shared.failure.lock().clone()
    }

    /// A worker mapped round-robin onto the buffers.
    pub fn worker(&self, index: usize) -> Worker {
        Worker {
            shared: self.shared.clone(),
            index,
            buffer: index % self.shared.buffers.len(),
            next_txn: 0,
            queues: CommitQueues::new(),
            stats: WorkerStats::default(),
        }
    }

    pub fn logger(&self, buffer: usize) -> Logger {
        assert!(buffer < self.shared.buffers.len());
        Logger {
            shared: self.shared.clone(),
            buffer,
            last_flush: Instant::now(),
            stats: LoggerStats::default(),
        }
    }

    /// Spawns one logger thread per buffer.
    pub fn start_loggers(&self) {
        let mut handles = self.loggers.lock();
        if !handles.is_empty() {
            return;
        }
        self.shared.stop.store(false, Ordering::Release);
        for b in 0..self.num_buffers() {
            let logger = self.logger(b);
            handles.push(
                thread::Builder::new()
                    .name(format!("logger-{b}"))
                    .spawn(move || logger.run())
                    .expect("spawn logger"),
            );
        }
    }

    pub fn stop_loggers(&self) {
        self.shared.stop.store(true, Ordering::Release);
        for h in self.loggers.lock().drain(..) {
            let _ = h.join();
        }
    }

    /// Closes and flushes everything buffered, on the calling thread.
    pub fn flush_all(&self) -> Result<(), EngineError> {
        for b in 0..self.num_buffers() {
            let mut logger = self.logger(b);
            logger.flush_ready()?;
            logger.on_timer()?;
            logger.flush_ready()?;
        }
        self.shared.coordinator.advance_csn(self.shared.trace());
        Ok(())
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.stop_loggers();
    }
}

/// Per-worker time split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    /// Waiting for the buffer latch or for free buffer space.
    pub log_contention: Duration,
    /// Serializing and copying records.
    pub log_work: Duration,
    pub committed: u64,
    pub aborted: u64,
}

/// What a blocking precommit did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precommit {
    Queued,
    Aborted,
}

pub struct Worker {
    shared: Arc<Shared>,
    index: usize,
    buffer: usize,
    next_txn: u64,
    queues: CommitQueues,
    pub stats: WorkerStats,
}

impl Worker {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn table(&self) -> &Table {
        &self.shared.table
    }

    pub fn is_halted(&self) -> bool {
        self.shared.is_halted()
    }

    pub fn begin(&mut self) -> Transaction {
        self.next_txn += 1;
        let id = TxnId(((self.index as u64 + 1) << 40) | self.next_txn);
        Transaction::begin(id, self.buffer)
    }

    pub fn read(&self, txn: &mut Transaction, key: Key) -> Result<Vec<u8>, TxnError> {
        txn::read(&self.shared.table, txn, key, self.shared.trace())
    }

    pub fn write(&self, txn: &mut Transaction, key: Key, value: Vec<u8>) -> Result<(), TxnError> {
        txn::write(&self.shared.table, txn, key, value)
    }

    pub fn scan(
        &self,
        txn: &mut Transaction,
        start: Key,
        len: u64,
    ) -> Result<Vec<(Key, Vec<u8>)>, TxnError> {
        txn::scan(&self.shared.table, txn, start, len, self.shared.trace())
    }

    pub fn abort(&mut self, txn: &mut Transaction) {
        txn::abort(&self.shared.table, txn);
        self.stats.aborted += 1;
    }

    /// Validation that waits for busy write locks.
    pub fn validate(&mut self, txn: &mut Transaction) -> Result<Validation, EngineError> {
        let shared = &self.shared;
        let mut spins = 0u32;
        let v = txn::validate_with(&shared.table, txn, || {
            spins += 1;
            if spins.is_multiple_of(64) {
                thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
            !shared.is_halted()
        });
        match v {
            Validation::WouldBlock => {
                txn.state = TxnState::Aborted;
                Err(EngineError::Halted)
            }
            Validation::Abort(_) => {
                self.stats.aborted += 1;
                Ok(v)
            }
            Validation::Ok => Ok(v),
        }
    }

    pub fn try_validate(&mut self, txn: &mut Transaction) -> Validation {
        let v = txn::try_validate(&self.shared.table, txn);
        if matches!(v, Validation::Abort(_)) {
            self.stats.aborted += 1;
        }
        v
    }

    /// SSN base: the largest SSN among the tuples read and written. Called
    /// with the write locks held and the read set validated.
    fn base(&self, txn: &Transaction) -> Ssn {
        let reads = txn.read_set.values().copied();
        if self.shared.fault == FaultMode::SkipWawTracking {
            return sequence::compute_base(reads, []);
        }
        let table = &self.shared.table;
        let writes = txn
            .write_set
            .keys()
            .map(|k| table.tuple(*k).expect("write-set key exists").ssn());
        sequence::compute_base(reads, writes)
    }

    /// Write phase up to the slot reservation: allocates the SSN, installs
    /// the writes and releases the locks. `None` means the buffer is full.
    pub fn try_reserve(
        &mut self,
        txn: &mut Transaction,
    ) -> Result<Option<Reservation>, EngineError> {
        debug_assert_eq!(txn.state, TxnState::Validated);
        debug_assert!(!txn.write_set.is_empty());
        let started = Instant::now();
        let base = self.base(txn);
        let len = record::encoded_len(txn.write_set.values().map(Vec::len));
        let buffer = &self.shared.buffers[self.buffer];
        let slot = match buffer.reserve(base, len) {
            Ok(slot) => slot,
            Err(ReserveError::BufferFull) => {
                self.stats.log_contention += started.elapsed();
                return Ok(None);
            }
            Err(e) => {
                self.abort(txn);
                return Err(e.into());
            }
        };
        self.stats.log_contention += started.elapsed();
        txn.ssn = slot.ssn;
        sequence::stamp_write_set(&self.shared.table, txn, self.shared.trace())?;
        txn::release_locks(&self.shared.table, txn);
        Ok(Some(slot))
    }

    /// Copies the record into its slot and queues the transaction.
    pub fn insert(&mut self, txn: &mut Transaction, slot: Reservation) {
        let started = Instant::now();
        let class = txn.class();
        self.shared.buffers[self.buffer].fill(&slot, |out| {
            encode_parts(
                out,
                txn.ssn,
                txn.id,
                class == TxnClass::WriteOnly,
                txn.write_set.iter().map(|(k, v)| (*k, v.as_slice())),
            )
        });
        self.stats.log_work += started.elapsed();
        self.enqueue(txn, class);
    }

    fn enqueue(&mut self, txn: &mut Transaction, class: TxnClass) {
        txn.state = TxnState::PreCommitted;
        if let Some(t) = self.shared.trace() {
            t.record(Event::Enqueue {
                txn: txn.id,
                ssn: txn.ssn,
                class,
                buffer: self.buffer,
            });
        }
        self.queues.enqueue(Pending {
            txn: txn.id,
            ssn: txn.ssn,
            class,
            began_at: txn.began_at,
            enqueued_at: Instant::now(),
        });
    }

    /// Read-only transactions take their base as SSN and go straight to
    /// `Qwr`.
    pub fn finish_readonly(&mut self, txn: &mut Transaction) {
        debug_assert!(txn.write_set.is_empty());
        let base = sequence::compute_base(txn.read_set.values().copied(), []);
        sequence::allocate_readonly_ssn(txn, base);
        self.enqueue(txn, TxnClass::ReadOnly);
    }

    /// Write phase of a validated transaction, waiting for buffer space.
    pub fn precommit(&mut self, txn: &mut Transaction) -> Result<(), EngineError> {
        if txn.write_set.is_empty() {
            self.finish_readonly(txn);
            return Ok(());
        }
        let started = Instant::now();
        loop {
            if let Some(slot) = self.try_reserve(txn)? {
                self.insert(txn, slot);
                return Ok(());
            }
            if self.shared.is_halted() {
                self.abort(txn);
                return Err(EngineError::Halted);
            }
            thread::yield_now();
            if started.elapsed() > Duration::from_millis(1) {
                thread::sleep(Duration::from_micros(50));
            }
        }
    }

    /// Validate and precommit, waiting as needed.
    pub fn finish(&mut self, txn: &mut Transaction) -> Result<Precommit, EngineError> {
        match self.validate(txn)? {
            Validation::Ok => {
                self.precommit(txn)?;
                Ok(Precommit::Queued)
            }
            _ => Ok(Precommit::Aborted),
        }
    }

    /// Commits whatever the queues admit right now.
    pub fn try_commit(&mut self) -> Vec<Committed> {
        let done =
            self.shared
                .coordinator
                .try_commit(&mut self.queues, self.buffer, self.shared.trace());
        self.stats.committed += done.len() as u64;
        done
    }

    pub fn pending(&self) -> usize {
        self.queues.len()
    }

    pub fn queues(&self) -> &CommitQueues {
        &self.queues
    }

    /// Waits until every queued transaction committed.
    pub fn drain(&mut self) -> Result<Vec<Committed>, EngineError> {
        let mut all = Vec::new();
        while self.pending() > 0 {
            all.extend(self.try_commit());
            if self.pending() == 0 {
                break;
            }
            if self.shared.is_halted() {
                return Err(EngineError::Halted);
            }
            thread::sleep(Duration::from_micros(100));
        }
        Ok(all)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoggerStats {
    pub flushes: u64,
    pub bytes: u64,
    pub heartbeats: u64,
}

pub struct Logger {
    shared: Arc<Shared>,
    buffer: usize,
    last_flush: Instant,
    pub stats: LoggerStats,
}

impl Logger {
    pub fn buffer(&self) -> usize {
        self.buffer
    }

    fn buf(&self) -> &LogBuffer {
        &self.shared.buffers[self.buffer]
    }

    /// Group-commit timer expired, or the buffer is at least half full.
    pub fn timer_due(&self) -> bool {
        let cfg = &self.shared.config;
        self.last_flush.elapsed() >= cfg.flush_interval
            || self.buf().pending_bytes() as f64
                >= cfg.half_full_threshold * cfg.buffer_capacity as f64
    }

    /// SSN every buffer should reach: the largest handed out anywhere, or
    /// an explicitly requested floor.
    fn heartbeat_target(&self) -> Ssn {
        let max = self
            .shared
            .buffers
            .iter()
            .map(|b| b.ssn())
            .max()
            .unwrap_or(Ssn::ZERO);
        max.max(Ssn(self.shared.ssn_floor.load(Ordering::Acquire)))
    }

    /// Timer action: lifts an idle buffer with an empty record if others
    /// moved ahead, then closes the generating segment.
    pub fn on_timer(&mut self) -> Result<bool, EngineError> {
        if self.shared.is_halted() {
            return Err(EngineError::Halted);
        }
        let target = self.heartbeat_target();
        let buf = &self.shared.buffers[self.buffer];
        if buf.ssn() < target {
            let len = record::MIN_RECORD_LEN;
            match buf.reserve(Ssn(target.0 - 1), len) {
                Ok(slot) => {
                    buf.fill(&slot, |out| LogRecord::heartbeat(slot.ssn).encode_into(out));
                    self.stats.heartbeats += 1;
                }
                Err(ReserveError::BufferFull) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.last_flush = Instant::now();
        Ok(buf.establish(CloseTrigger::TimerExpired))
    }

    /// Flushes the segment at the flush cursor if it is ready.
    pub fn flush_one(&mut self) -> Result<bool, EngineError> {
        if self.shared.is_halted() {
            return Err(EngineError::Halted);
        }
        let shared = self.shared.clone();
        let mut device = shared.devices[self.buffer].lock();
        match shared.buffers[self.buffer].flush_one(&mut device, shared.trace()) {
            Ok(Some(out)) => {
                self.stats.flushes += 1;
                self.stats.bytes += out.bytes;
                self.last_flush = Instant::now();
                drop(device);
                self.advance_csn();
                Ok(true)
            }
            Ok(None) => Ok(false),
            Err(e) => {
                let why = match &e {
                    DeviceError::InjectedCrash => None,
                    other => Some(format!("buffer {}: {other}", self.buffer)),
                };
                shared.halt(why);
                Err(e.into())
            }
        }
    }

    pub fn flush_ready(&mut self) -> Result<u64, EngineError> {
        let mut n = 0;
        while self.flush_one()? {
            n += 1;
        }
        Ok(n)
    }

    pub fn advance_csn(&self) -> Ssn {
        self.shared.coordinator.advance_csn(self.shared.trace())
    }

    /// One pass of the logger loop.
    pub fn step(&mut self) -> Result<(), EngineError> {
        self.flush_ready()?;
        if self.timer_due() {
            self.on_timer()?;
            self.flush_ready()?;
            self.advance_csn();
        }
        Ok(())
    }

    pub fn run(mut self) {
        let poll = self.shared.config.logger_poll;
        while !self.shared.stop.load(Ordering::Acquire) && !self.shared.is_halted() {
            if self.step().is_err() {
                break;
            }
            thread::sleep(poll);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MemStore;

    fn config(buffers: usize) -> Config {
        Config {
            num_buffers: buffers,
            buffer_capacity: 8192,
            io_unit_size: 256,
            segment_ring_size: 8,
            flush_interval: Duration::from_millis(1),
            ..Config::default()
        }
    }

    fn engine(buffers: usize) -> Engine {
        let table = Table::from_values((0..16).map(|k: u64| vec![k as u8]));
        Engine::open(
            config(buffers),
            table,
            Arc::new(MemStore::new()),
            EngineOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn begins_get_distinct_ids_and_mapped_buffer() {
        let e = engine(2);
        let mut w1 = e.worker(1);
        let a = w1.begin();
        let b = w1.begin();
        assert_ne!(a.id, b.id);
        assert_eq!(a.buffer_id, 1);
        assert_eq!(e.worker(2).buffer(), 0);
    }

    #[test]
    fn write_only_commits_after_flush() {
        let e = engine(1);
        let mut w = e.worker(0);
        let mut t = w.begin();
        w.write(&mut t, 3, b"v".to_vec()).unwrap();
        assert_eq!(w.finish(&mut t).unwrap(), Precommit::Queued);
        assert_eq!(t.ssn, Ssn(1));
        assert_eq!(e.table().get(3).unwrap().ssn, Ssn(1));
        assert_eq!(
            e.table().tuple(3).unwrap().holder(),
            None,
            "early lock release"
        );
        assert!(w.try_commit().is_empty());
        e.flush_all().unwrap();
        let done = w.try_commit();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].class, TxnClass::WriteOnly);
    }

    #[test]
    fn reader_waits_for_every_buffer() {
        let e = engine(2);
        let mut w0 = e.worker(0);
        let mut w1 = e.worker(1);
        let mut t1 = w0.begin();
        w0.write(&mut t1, 1, b"x".to_vec()).unwrap();
        w0.finish(&mut t1).unwrap();

        let mut t2 = w1.begin();
        assert_eq!(w1.read(&mut t2, 1).unwrap(), b"x");
        w1.write(&mut t2, 2, b"y".to_vec()).unwrap();
        w1.finish(&mut t2).unwrap();
        assert!(t2.ssn > t1.ssn);

        // Only buffer 1 flushed: t2 is durable but csn stays at 0.
        let mut l1 = e.logger(1);
        l1.on_timer().unwrap();
        l1.flush_ready().unwrap();
        assert!(w1.try_commit().is_empty());

        e.flush_all().unwrap();
        assert_eq!(w0.try_commit().len(), 1);
        assert_eq!(w1.try_commit().len(), 1);
    }

    #[test]
    fn idle_buffer_is_lifted_by_heartbeat() {
        let e = engine(2);
        let mut w0 = e.worker(0);
        let mut t = w0.begin();
        w0.read(&mut t, 0).unwrap();
        w0.write(&mut t, 0, b"z".to_vec()).unwrap();
        w0.finish(&mut t).unwrap();
        e.flush_all().unwrap();
        assert_eq!(e.dsn(1), t.ssn);
        assert_eq!(e.csn(), t.ssn);
        assert_eq!(w0.try_commit().len(), 1);
    }

    #[test]
    fn readonly_takes_base_and_needs_csn() {
        let e = engine(1);
        e.table().install(5, Ssn(7), b"s".to_vec()).unwrap();
        let mut w = e.worker(0);
        let mut t = w.begin();
        w.read(&mut t, 5).unwrap();
        w.read(&mut t, 4).unwrap();
        w.finish(&mut t).unwrap();
        assert_eq!(t.ssn, Ssn(7));
        assert!(w.try_commit().is_empty());
        e.request_ssn_floor(Ssn(7));
        e.flush_all().unwrap();
        assert_eq!(w.try_commit().len(), 1);
    }

    #[test]
    fn centralized_requires_one_buffer() {
        let table = Table::from_values([vec![0u8]]);
        let err = Engine::open(
            config(2),
            table,
            Arc::new(MemStore::new()),
            EngineOptions {
                policy: SequencePolicy::Centralized,
                ..EngineOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Config(ConfigError::Invalid(_))));
    }

    #[test]
    fn threaded_run_commits_everything() {
        let e = Arc::new(engine(2));
        e.start_loggers();
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let e = e.clone();
                thread::spawn(move || {
                    let mut w = e.worker(i);
                    let mut committed = 0;
                    for n in 0..200u64 {
                        loop {
                            let mut t = w.begin();
                            let k = (n * 7 + i as u64) % 16;
                            w.read(&mut t, k).unwrap();
                            w.write(&mut t, (k + 1) % 16, vec![i as u8; 20]).unwrap();
                            if w.finish(&mut t).unwrap() == Precommit::Queued {
                                break;
                            }
                        }
                        committed += w.try_commit().len();
                    }
                    committed += w.drain().unwrap().len();
                    committed
                })
            })
            .collect();
        let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(total, 800);
        e.stop_loggers();
    }
}
