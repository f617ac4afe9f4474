//! Threaded workloads and crash trials against a live engine.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{begin_checkpoint, run_checkpoint, CheckpointStatus, Validity};
use crate::device::MemStore;
use crate::engine::{Engine, EngineError, EngineOptions, Precommit};
use crate::recovery;
use crate::txn::{Table, TupleData};
use crate::types::{Config, Ssn};
use crate::verify::levels::check_recoverability;
use crate::verify::oracle::{consistency_oracle, OracleVerdict, Survivors};
use crate::verify::trace::TraceRecorder;

/// Small buffers and a 1 ms group-commit timer.
pub fn small_config(buffers: usize) -> Config {
    Config {
        num_buffers: buffers,
        buffer_capacity: 1 << 16,
        io_unit_size: 512,
        segment_ring_size: 16,
        flush_interval: Duration::from_millis(1),
        logger_poll: Duration::from_micros(200),
        ..Config::default()
    }
}

/// `keys` tuples whose value is the key's little-endian bytes.
pub fn key_table(keys: u64) -> Table {
    Table::from_values((0..keys).map(|k| k.to_le_bytes().to_vec()))
}

#[derive(Debug, Clone, Copy)]
pub struct Load {
    pub workers: usize,
    /// Transactions each worker gets through precommit; `u64::MAX` runs
    /// until the engine halts.
    pub txns_per_worker: u64,
    pub keys: u64,
    pub seed: u64,
}

/// Runs a mix of read-modify-writes, blind writes, reads with writes
/// elsewhere and read-only transactions on `load.workers` threads. Returns
/// the number of acknowledged commits; stops early if the engine halts.
pub fn run_load(engine: &Arc<Engine>, load: Load) -> u64 {
    let handles: Vec<_> = (0..load.workers)
        .map(|i| {
            let engine = engine.clone();
            thread::spawn(move || worker_loop(&engine, i, load))
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("worker panicked"))
        .sum()
}

fn worker_loop(engine: &Engine, index: usize, load: Load) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(load.seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let mut w = engine.worker(index);
    let mut committed = 0u64;
    let mut done = 0u64;
    while done < load.txns_per_worker {
        if w.is_halted() {
            return committed;
        }
        let mut t = w.begin();
        let a = rng.gen_range(0..load.keys);
        let b = rng.gen_range(0..load.keys);
        let value = rng.gen::<u64>().to_le_bytes().to_vec();
        let ops = match rng.gen_range(0..10) {
            0..=4 => w.read(&mut t, a).and_then(|_| w.write(&mut t, a, value)),
            5..=6 => w
                .write(&mut t, a, value.clone())
                .and_then(|_| w.write(&mut t, b, value)),
            7..=8 => w.read(&mut t, a).and_then(|_| w.write(&mut t, b, value)),
            _ => w.read(&mut t, a).and_then(|_| w.read(&mut t, b).map(drop)),
        };
        ops.expect("keys are in range");
        match w.finish(&mut t) {
            Ok(Precommit::Queued) => done += 1,
            Ok(Precommit::Aborted) => {}
            Err(EngineError::Halted) => return committed,
            Err(e) => panic!("worker {index}: {e}"),
        }
        committed += w.try_commit().len() as u64;
    }
    match w.drain() {
        Ok(c) => committed + c.len() as u64,
        Err(_) => committed,
    }
}

fn wait_for_events(trace: &TraceRecorder, n: usize, load_done: impl Fn() -> bool) {
    while trace.len() < n && !load_done() {
        thread::sleep(Duration::from_micros(100));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckpointTrial {
    pub keys: u64,
    pub workers: usize,
    /// Total transactions of the load.
    pub txns: u64,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrialReport {
    pub buffers: usize,
    pub acked: u64,
    pub checkpoint_epoch: u64,
    pub rsn: Ssn,
    pub replayed: usize,
    pub oracle: OracleVerdict,
    pub recoverable: bool,
}

impl TrialReport {
    pub fn passed(&self) -> bool {
        self.oracle.is_pass() && self.recoverable
    }
}

/// Load on worker threads, a fuzzy checkpoint taken at a random point of
/// it, a crash at a random point after the checkpoint validated, then
/// recovery from checkpoint plus log tail, checked by the oracle.
pub fn checkpoint_crash_trial(t: CheckpointTrial) -> Result<TrialReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let buffers = rng.gen_range(1..=3);
    let store = MemStore::new();
    let trace = Arc::new(TraceRecorder::new());
    let engine = Arc::new(
        Engine::open(
            small_config(buffers),
            key_table(t.keys),
            Arc::new(store.clone()),
            EngineOptions {
                trace: Some(trace.clone()),
                ..EngineOptions::default()
            },
        )
        .map_err(|e| e.to_string())?,
    );
    engine.start_loggers();
    let workers = t.workers.max(1);
    let load = Load {
        workers,
        txns_per_worker: t.txns.div_ceil(workers as u64),
        keys: t.keys,
        seed: t.seed,
    };
    let loader = {
        let engine = engine.clone();
        thread::spawn(move || run_load(&engine, load))
    };
    // About five events per transaction.
    let events = (t.txns * 5) as usize;
    let done = || loader.is_finished();
    wait_for_events(&trace, rng.gen_range(0..events / 2), done);
    let meta = run_checkpoint(&engine, 2, 2, Duration::from_secs(30)).map_err(|e| e.to_string())?;
    if meta.status != CheckpointStatus::Valid {
        return Err("checkpoint returned without validating".into());
    }
    wait_for_events(&trace, trace.len() + rng.gen_range(0..events / 2), done);
    engine.halt();
    let acked = loader.join().map_err(|_| "load panicked".to_string())?;
    engine.stop_loggers();

    let trace = trace.snapshot();
    let recovered = recovery::recover(&store, key_table(t.keys), 3).map_err(|e| e.to_string())?;
    let used = recovered
        .plan
        .checkpoint
        .as_ref()
        .ok_or("recovery ignored the validated checkpoint")?;
    if used.epoch != meta.epoch || recovered.plan.rsns != used.rsn {
        return Err(format!(
            "recovery used epoch {} rsn {:?}",
            used.epoch, recovered.plan.rsns
        ));
    }
    let initial: Vec<TupleData> = key_table(t.keys).snapshot();
    let survivors = Survivors::from_recovery(&recovered.plan, &recovered.replay.replayed);
    Ok(TrialReport {
        buffers,
        acked,
        checkpoint_epoch: meta.epoch,
        rsn: meta.rsn,
        replayed: recovered.replay.replayed.len(),
        oracle: consistency_oracle(&recovered.table, &initial, &trace, &survivors),
        recoverable: check_recoverability(&trace).is_pass(),
    })
}

/// A write released early but not yet durable is visible to a checkpoint
/// scan. Checks that the checkpoint stays invalid until the CSN passes the
/// write, that a crash before then recovers without the dirty value, and
/// that it validates once the write is durable.
pub fn dirty_release_check() -> Result<(), String> {
    let keys = 16;
    let store = MemStore::new();
    let engine = Engine::open(
        small_config(1),
        key_table(keys),
        Arc::new(store.clone()),
        EngineOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut w = engine.worker(0);
    let mut t = w.begin();
    w.read(&mut t, 5).map_err(|e| e.to_string())?;
    w.write(&mut t, 5, b"dirty".to_vec())
        .map_err(|e| e.to_string())?;
    if w.finish(&mut t).map_err(|e| e.to_string())? != Precommit::Queued {
        return Err("writer aborted".into());
    }
    let ensure = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };
    ensure(
        engine
            .table()
            .tuple(5)
            .map_err(|e| e.to_string())?
            .holder()
            .is_none(),
        "lock still held",
    )?;

    let mut scan = begin_checkpoint(&engine, 2, 1).map_err(|e| e.to_string())?;
    ensure(scan.max_observed() == t.ssn, "scan missed the dirty tuple")?;
    ensure(
        scan.try_finish(&engine).map_err(|e| e.to_string())? == Validity::NotYet,
        "validated before the writer was durable",
    )?;

    let crashed = store.fork();
    let r = recovery::recover(&crashed, key_table(keys), 2).map_err(|e| e.to_string())?;
    ensure(r.plan.checkpoint.is_none(), "unvalidated checkpoint used")?;
    ensure(
        r.table.snapshot() == key_table(keys).snapshot(),
        "dirty value recovered",
    )?;

    engine.flush_all().map_err(|e| e.to_string())?;
    ensure(engine.csn() == t.ssn, "csn did not reach the writer")?;
    ensure(
        scan.try_finish(&engine).map_err(|e| e.to_string())? == Validity::NotYet,
        "validated with csn equal to the observed maximum",
    )?;
    engine.request_ssn_floor(scan.max_observed().next());
    engine.flush_all().map_err(|e| e.to_string())?;
    ensure(
        scan.try_finish(&engine).map_err(|e| e.to_string())? == Validity::Valid,
        "never validated",
    )?;
    ensure(w.try_commit().len() == 1, "writer not committed")?;
    let r = recovery::recover(&store, key_table(keys), 2).map_err(|e| e.to_string())?;
    ensure(
        r.table.get(5).map_err(|e| e.to_string())?.value == b"dirty",
        "durable write lost",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_trial_passes() {
        let r = checkpoint_crash_trial(CheckpointTrial {
            keys: 32,
            workers: 3,
            txns: 600,
            seed: 1,
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn dirty_release_never_validates_early() {
        dirty_release_check().unwrap();
    }
}
