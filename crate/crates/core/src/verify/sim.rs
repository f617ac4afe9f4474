//! Deterministic single-threaded scheduler.
//!
//! Workers and loggers are driven as step machines from one thread; a
//! seeded RNG picks the next enabled action. The same seed and program
//! always produce the same schedule, so a run can be replayed with a crash
//! injected at any step or after any byte on any device.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{CrashPlan, CrashPoint, CrashSwitch, MemStore, Store};
use crate::engine::{
    Engine, EngineError, EngineOptions, FaultMode, Logger, SequencePolicy, Worker,
};
use crate::record::scan_records;
use crate::recovery::{self, Recovered, RecoveryError};
use crate::txn::{Table, Transaction, TupleData, Validation};
use crate::types::{Config, Key, TxnId};
use crate::verify::levels::LevelReport;
use crate::verify::oracle::{consistency_oracle, OracleVerdict, Survivors};
use crate::verify::trace::{ExecutionTrace, TraceRecorder};
use crate::wal::Reservation;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Read(Key),
    Write(Key, Vec<u8>),
    Scan(Key, u64),
}

/// One transaction's operations, run in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnProgram {
    pub ops: Vec<Op>,
}

/// Per worker, the transactions it runs one after another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub workers: Vec<Vec<TxnProgram>>,
}

impl Program {
    pub fn txn_count(&self) -> usize {
        self.workers.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub engine: Config,
    pub keys: u64,
    pub value_len: usize,
    pub fault: FaultMode,
    pub policy: SequencePolicy,
    /// Times an aborted transaction is restarted before it is dropped.
    pub retries: usize,
    pub max_steps: u64,
}

impl SimConfig {
    /// Small buffers and segments so that a few transactions already
    /// exercise rotation of the segment ring and buffer-full waits.
    pub fn small(buffers: usize, keys: u64) -> SimConfig {
        SimConfig {
            engine: Config {
                num_buffers: buffers,
                buffer_capacity: 2048,
                io_unit_size: 128,
                segment_ring_size: 8,
                flush_interval: Duration::from_millis(5),
                log_file_rotate_bytes: 1 << 30,
                ..Config::default()
            },
            keys,
            value_len: 8,
            fault: FaultMode::None,
            policy: SequencePolicy::Scalable,
            retries: 2,
            max_steps: 1_000_000,
        }
    }

    pub fn initial(&self) -> Vec<TupleData> {
        (0..self.keys)
            .map(|k| TupleData {
                ssn: crate::types::Ssn::ZERO,
                value: initial_value(k, self.value_len),
            })
            .collect()
    }
}

fn initial_value(key: Key, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    let bytes = key.to_le_bytes();
    let n = len.min(8);
    v[..n].copy_from_slice(&bytes[..n]);
    v
}

/// When the run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimCrash {
    None,
    /// Stop before step `k`; if that step is a flush, its write is torn.
    AtStep(u64),
    /// Only the first `bytes` bytes ever appended to `device` survive.
    AfterBytes {
        device: usize,
        bytes: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Worker(usize),
    Commit(usize),
    Timer(usize),
    Flush(usize),
}

enum Stage {
    Idle,
    Running { txn: Transaction, op: usize },
    Validating { txn: Transaction },
    Reserving { txn: Transaction },
    Inserting { txn: Transaction, slot: Reservation },
    Done,
}

struct SimWorker {
    worker: Worker,
    next: usize,
    attempt: usize,
    stage: Stage,
}

/// Everything a finished or crashed run leaves behind.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: ExecutionTrace,
    pub store: MemStore,
    pub initial: Vec<TupleData>,
    pub steps: u64,
    pub crashed: bool,
    pub committed: BTreeSet<TxnId>,
    pub aborted: u64,
    pub num_buffers: usize,
}

impl SimOutcome {
    /// Byte offsets on each device at which a record ends.
    pub fn record_boundaries(&self) -> Vec<(usize, Vec<u64>)> {
        (0..self.num_buffers)
            .map(|b| {
                let mut ends = Vec::new();
                let mut base = 0u64;
                let mut seq = 0;
                while let Ok(bytes) = self.store.read(&crate::device::log_file_name(b, seq)) {
                    let mut at = 0usize;
                    for r in scan_records(&bytes).records {
                        at += r.encoded_len();
                        ends.push(base + at as u64);
                    }
                    base += bytes.len() as u64;
                    seq += 1;
                }
                (b, ends)
            })
            .collect()
    }
}

/// Runs `program` under the seeded schedule.
pub fn run(
    cfg: &SimConfig,
    program: &Program,
    seed: u64,
    crash: SimCrash,
) -> Result<SimOutcome, EngineError> {
    let initial = cfg.initial();
    let table = Table::from_values(initial.iter().map(|t| t.value.clone()));
    let store = MemStore::new();
    let plan = match crash {
        SimCrash::AfterBytes { device, bytes } => CrashPlan {
            points: vec![CrashPoint::AfterBytes { device, bytes }],
        },
        _ => CrashPlan::default(),
    };
    let switch = Arc::new(CrashSwitch::new(plan, seed ^ 0x5eed));
    let trace = Arc::new(TraceRecorder::new());
    let engine = Engine::open(
        cfg.engine.clone(),
        table,
        Arc::new(store.clone()),
        EngineOptions {
            policy: cfg.policy,
            fault: cfg.fault,
            device_model: None,
            crash: Some(switch.clone()),
            trace: Some(trace.clone()),
            ssn_floor: crate::types::Ssn::ZERO,
        },
    )?;
    let mut workers: Vec<SimWorker> = (0..program.workers.len())
        .map(|i| SimWorker {
            worker: engine.worker(i),
            next: 0,
            attempt: 0,
            stage: Stage::Idle,
        })
        .collect();
    let mut loggers: Vec<Logger> = (0..engine.num_buffers())
        .map(|b| engine.logger(b))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut committed = BTreeSet::new();
    let mut steps = 0u64;
    let mut crashed = false;
    let mut enabled = Vec::new();

    loop {
        let all_done = workers
            .iter()
            .all(|w| matches!(w.stage, Stage::Done) && w.worker.pending() == 0);
        if all_done {
            break;
        }
        if steps >= cfg.max_steps {
            return Err(EngineError::Config(crate::types::ConfigError::Invalid(
                format!("schedule did not finish within {} steps", cfg.max_steps),
            )));
        }
        enabled.clear();
        for (i, w) in workers.iter().enumerate() {
            if !matches!(w.stage, Stage::Done) {
                // Program steps are weighted up so work outpaces timers.
                enabled.extend([Action::Worker(i); 3]);
            }
            if w.worker.pending() > 0 {
                enabled.push(Action::Commit(i));
            }
        }
        for b in 0..engine.num_buffers() {
            enabled.push(Action::Timer(b));
            if engine.buffer(b).flush_ready() {
                enabled.extend([Action::Flush(b); 2]);
            }
        }
        let action = *enabled
            .choose(&mut rng)
            .expect("loggers are always enabled");

        if crash == SimCrash::AtStep(steps) {
            if matches!(action, Action::Flush(_)) {
                switch.arm_tear();
            } else {
                engine.halt();
                crashed = true;
                break;
            }
        }
        steps += 1;

        let result = match action {
            Action::Worker(i) => step_worker(&mut workers[i], &program.workers[i], cfg.retries),
            Action::Commit(i) => {
                committed.extend(workers[i].worker.try_commit().into_iter().map(|c| c.txn));
                Ok(())
            }
            Action::Timer(b) => loggers[b].on_timer().map(|_| ()),
            Action::Flush(b) => loggers[b].flush_one().map(|_| ()),
        };
        match result {
            Ok(()) => {}
            Err(EngineError::Device(_)) | Err(EngineError::Halted) if engine.is_halted() => {
                crashed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let aborted = workers.iter().map(|w| w.worker.stats.aborted).sum();
    drop(workers);
    drop(loggers);
    drop(engine);
    Ok(SimOutcome {
        trace: trace.snapshot(),
        store,
        initial,
        steps,
        crashed,
        committed,
        aborted,
        num_buffers: cfg.engine.num_buffers,
    })
}

fn step_worker(
    w: &mut SimWorker,
    program: &[TxnProgram],
    retries: usize,
) -> Result<(), EngineError> {
    let stage = std::mem::replace(&mut w.stage, Stage::Idle);
    w.stage = match stage {
        Stage::Idle => {
            if w.next >= program.len() {
                Stage::Done
            } else {
                Stage::Running {
                    txn: w.worker.begin(),
                    op: 0,
                }
            }
        }
        Stage::Running { mut txn, op } => {
            let ops = &program[w.next].ops;
            match ops.get(op) {
                Some(Op::Read(k)) => {
                    w.worker.read(&mut txn, *k)?;
                }
                Some(Op::Write(k, v)) => w.worker.write(&mut txn, *k, v.clone())?,
                Some(Op::Scan(k, n)) => {
                    w.worker.scan(&mut txn, *k, *n)?;
                }
                None => {}
            }
            if op + 1 >= ops.len() {
                Stage::Validating { txn }
            } else {
                Stage::Running { txn, op: op + 1 }
            }
        }
        Stage::Validating { mut txn } => match w.worker.try_validate(&mut txn) {
            Validation::Ok if txn.write_set.is_empty() => {
                w.worker.finish_readonly(&mut txn);
                finish_txn(w);
                Stage::Idle
            }
            Validation::Ok => Stage::Reserving { txn },
            Validation::WouldBlock => Stage::Validating { txn },
            Validation::Abort(_) => {
                if w.attempt < retries {
                    w.attempt += 1;
                } else {
                    finish_txn(w);
                }
                Stage::Idle
            }
        },
        Stage::Reserving { mut txn } => match w.worker.try_reserve(&mut txn)? {
            Some(slot) => Stage::Inserting { txn, slot },
            None => Stage::Reserving { txn },
        },
        Stage::Inserting { mut txn, slot } => {
            w.worker.insert(&mut txn, slot);
            finish_txn(w);
            Stage::Idle
        }
        Stage::Done => Stage::Done,
    };
    Ok(())
}

fn finish_txn(w: &mut SimWorker) {
    w.next += 1;
    w.attempt = 0;
}

/// Recovery plus every check, for one run.
#[derive(Debug)]
pub struct RunCheck {
    pub oracle: OracleVerdict,
    pub levels: LevelReport,
    pub recovered: Recovered,
}

impl RunCheck {
    pub fn passed(&self) -> bool {
        self.oracle.is_pass() && self.levels.recoverable.is_pass() && self.levels.hierarchy_holds()
    }
}

pub fn recover_and_check(outcome: &SimOutcome, threads: usize) -> Result<RunCheck, RecoveryError> {
    let table = Table::from_values(outcome.initial.iter().map(|t| t.value.clone()));
    let recovered = recovery::recover(&outcome.store, table, threads)?;
    let survivors = Survivors::from_recovery(&recovered.plan, &recovered.replay.replayed);
    let oracle = consistency_oracle(
        &recovered.table,
        &outcome.initial,
        &outcome.trace,
        &survivors,
    );
    Ok(RunCheck {
        oracle,
        levels: LevelReport::new(&outcome.trace),
        recovered,
    })
}

/// Shape mix for generated transactions.
#[derive(Debug, Clone, Copy)]
pub struct ProgramShape {
    pub workers: usize,
    pub txns: usize,
    pub keys: u64,
    pub value_len: usize,
}

/// Random program: blind writes, read-modify-writes, reads with writes
/// elsewhere, short scans and read-only transactions.
pub fn random_program(rng: &mut impl Rng, shape: ProgramShape) -> Program {
    let mut workers = vec![Vec::new(); shape.workers.max(1)];
    for t in 0..shape.txns {
        let w = t % workers.len();
        let mut ops = Vec::new();
        let key = |rng: &mut dyn rand::RngCore| rng.gen_range(0..shape.keys);
        let value = |rng: &mut dyn rand::RngCore| {
            let mut v = vec![0u8; shape.value_len];
            rng.fill(v.as_mut_slice());
            v
        };
        match rng.gen_range(0..10) {
            0..=2 => {
                for _ in 0..rng.gen_range(1..=3) {
                    ops.push(Op::Write(key(rng), value(rng)));
                }
            }
            3..=5 => {
                let k = key(rng);
                ops.push(Op::Read(k));
                ops.push(Op::Write(k, value(rng)));
            }
            6..=7 => {
                for _ in 0..rng.gen_range(1..=2) {
                    ops.push(Op::Read(key(rng)));
                }
                ops.push(Op::Write(key(rng), value(rng)));
            }
            8 => {
                let start = key(rng);
                ops.push(Op::Scan(start, rng.gen_range(1..=4)));
                ops.push(Op::Write(key(rng), value(rng)));
            }
            _ => {
                for _ in 0..rng.gen_range(1..=3) {
                    ops.push(Op::Read(key(rng)));
                }
            }
        }
        workers[w].push(TxnProgram { ops });
    }
    Program { workers }
}
