//! Runs a workload against a live engine and collects metrics.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hdrhistogram::Histogram;
use parlog::checkpoint::{self, CheckpointError};
use parlog::device::{DeviceModel, DirStore, NullStore, Store};
use parlog::engine::{Precommit, WorkerStats};
use parlog::{Config, Engine, EngineError, EngineOptions, SequencePolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::workload::{load_database, TxnGen, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    /// Bytes are discarded; the device model paces every write.
    Sim,
    /// Files in a directory, synced after every write.
    Real,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workload: WorkloadSpec,
    pub engine: Config,
    pub policy: SequencePolicy,
    pub devices: DeviceKind,
    pub model: DeviceModel,
    /// Log directory for real devices.
    pub dir: Option<PathBuf>,
    /// Take one checkpoint once this fraction of the transactions
    /// precommitted.
    pub checkpoint_at: Option<f64>,
}

impl RunConfig {
    pub fn new(workload: WorkloadSpec, buffers: usize) -> RunConfig {
        RunConfig {
            workload,
            engine: Config {
                num_buffers: buffers,
                ..Config::default()
            },
            policy: SequencePolicy::Scalable,
            devices: DeviceKind::Sim,
            model: DeviceModel::SSD,
            dir: None,
            checkpoint_at: None,
        }
    }

    /// The centralized baseline: one buffer, one atomic sequence counter,
    /// commit in total order.
    pub fn centralized(workload: WorkloadSpec) -> RunConfig {
        RunConfig {
            policy: SequencePolicy::Centralized,
            ..RunConfig::new(workload, 1)
        }
    }

    pub fn label(&self) -> String {
        match self.policy {
            SequencePolicy::Centralized => "centr".to_string(),
            SequencePolicy::Scalable => format!("parallel-{}", self.engine.num_buffers),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceReport {
    pub id: usize,
    pub bytes: u64,
    pub writes: u64,
    pub mb_per_s: f64,
    /// Fraction of the run the device spent writing.
    pub utilization: f64,
}

/// Share of worker time, summed over workers.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Breakdown {
    pub log_contention: f64,
    pub log_work: f64,
    pub other: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointReport {
    pub epoch: u64,
    pub rsn: u64,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub label: String,
    pub workload: WorkloadSpec,
    pub buffers: usize,
    pub devices: DeviceKind,
    pub committed: u64,
    pub aborts: u64,
    /// Transactions dropped after exhausting their retries.
    pub dropped: u64,
    pub elapsed_s: f64,
    pub throughput: f64,
    /// Throughput between 10% and 90% of the commits.
    pub steady_throughput: f64,
    /// Precommit enqueue to commit.
    pub latency_mean_us: f64,
    pub latency_p99_us: f64,
    pub latency_max_us: f64,
    /// Begin to commit.
    pub e2e_mean_us: f64,
    pub e2e_p99_us: f64,
    /// Longest a 5 ms coordinator sleep overran; a host that does not
    /// schedule the process shows up here.
    pub stall_max_us: f64,
    pub device: Vec<DeviceReport>,
    pub breakdown: Breakdown,
    /// "device" when the busiest device was writing at least 85% of the
    /// time, "cpu" otherwise.
    pub bound: String,
    pub checkpoint: Option<CheckpointReport>,
}

impl Report {
    pub fn device_bound(&self) -> bool {
        self.bound == "device"
    }
}

struct WorkerResult {
    latency: Histogram<u64>,
    e2e: Histogram<u64>,
    stats: WorkerStats,
    busy: Duration,
    dropped: u64,
}

/// How often a rate-limited worker checks for commits while idle.
const COMMIT_POLL: Duration = Duration::from_micros(100);

fn histogram() -> Histogram<u64> {
    // One microsecond up to ten minutes.
    Histogram::new_with_bounds(1, 600_000_000, 3).expect("valid bounds")
}

fn record(h: &mut Histogram<u64>, d: Duration) {
    h.saturating_record(d.as_micros().max(1) as u64);
}

fn open_store(cfg: &RunConfig) -> Result<Arc<dyn Store>, BenchError> {
    match cfg.devices {
        DeviceKind::Sim => Ok(Arc::new(NullStore)),
        DeviceKind::Real => {
            let dir = cfg
                .dir
                .as_ref()
                .ok_or_else(|| BenchError::Config("real devices need a log directory".into()))?;
            let store = DirStore::open(dir)?;
            // A fresh run starts from the loader's state, so old logs and
            // checkpoints in the directory would mislead recovery.
            for name in store.list()? {
                if name.starts_with("wal-") || name.starts_with("ckpt-") {
                    store.remove(&name)?;
                }
            }
            Ok(Arc::new(store))
        }
    }
}

pub fn run_benchmark(cfg: &RunConfig) -> Result<Report, BenchError> {
    cfg.workload.validate().map_err(BenchError::Config)?;
    if cfg.policy == SequencePolicy::Centralized && cfg.engine.num_buffers != 1 {
        return Err(BenchError::Config(format!(
            "the centralized baseline has one buffer and one device, not {}",
            cfg.engine.num_buffers
        )));
    }
    let table = load_database(&cfg.workload).map_err(|e| BenchError::Config(e.to_string()))?;
    let store = open_store(cfg)?;
    let engine = Arc::new(Engine::open(
        cfg.engine.clone(),
        table,
        store,
        EngineOptions {
            policy: cfg.policy,
            device_model: (cfg.devices == DeviceKind::Sim).then_some(cfg.model),
            ..EngineOptions::default()
        },
    )?);
    engine.start_loggers();

    let spec = &cfg.workload;
    let threads = spec.threads;
    let committed = Arc::new(AtomicU64::new(0));
    let precommitted = Arc::new(AtomicU64::new(0));
    let started = Instant::now();
    let handles: Vec<_> = (0..threads)
        .map(|i| {
            let share =
                spec.txns / threads as u64 + u64::from((i as u64) < spec.txns % threads as u64);
            let engine = engine.clone();
            let spec = spec.clone();
            let committed = committed.clone();
            let precommitted = precommitted.clone();
            thread::spawn(move || worker(&engine, &spec, i, share, &committed, &precommitted))
        })
        .collect();

    // Coordinator: progress samples for the steady-state window, and the
    // optional checkpoint.
    let mut samples: Vec<(Instant, u64)> = vec![(started, 0)];
    let mut checkpoint_report = None;
    let mut checkpoint_due = cfg.checkpoint_at.map(|f| (f * spec.txns as f64) as u64);
    let mut stall = Duration::ZERO;
    while !handles.iter().all(|h| h.is_finished()) {
        let asked = Duration::from_millis(5);
        let slept = Instant::now();
        thread::sleep(asked);
        stall = stall.max(slept.elapsed().saturating_sub(asked));
        samples.push((Instant::now(), committed.load(Ordering::Relaxed)));
        if checkpoint_due.is_some_and(|due| precommitted.load(Ordering::Relaxed) >= due) {
            checkpoint_due = None;
            let t = Instant::now();
            let meta = checkpoint::run_checkpoint(
                &engine,
                cfg.engine.checkpoint_threads,
                cfg.engine.checkpoint_files_per_thread,
                Duration::from_secs(60),
            )?;
            checkpoint_report = Some(CheckpointReport {
                epoch: meta.epoch,
                rsn: meta.rsn.get(),
                millis: t.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let mut results = Vec::with_capacity(threads);
    for h in handles {
        results.push(
            h.join()
                .map_err(|_| BenchError::Config("worker panicked".into()))??,
        );
    }
    let elapsed = started.elapsed();
    samples.push((Instant::now(), committed.load(Ordering::Relaxed)));
    engine.stop_loggers();
    if let Some(why) = engine.failure() {
        return Err(BenchError::Config(format!("engine failed: {why}")));
    }

    let mut latency = histogram();
    let mut e2e = histogram();
    let mut stats = WorkerStats::default();
    let mut busy = Duration::ZERO;
    let mut dropped = 0;
    for r in &results {
        latency.add(&r.latency).expect("same bounds");
        e2e.add(&r.e2e).expect("same bounds");
        stats.log_contention += r.stats.log_contention;
        stats.log_work += r.stats.log_work;
        stats.committed += r.stats.committed;
        stats.aborted += r.stats.aborted;
        busy += r.busy;
        dropped += r.dropped;
    }
    let secs = elapsed.as_secs_f64().max(1e-9);
    let device: Vec<DeviceReport> = engine
        .device_stats()
        .into_iter()
        .enumerate()
        .map(|(id, d)| DeviceReport {
            id,
            bytes: d.bytes,
            writes: d.writes,
            mb_per_s: d.bytes as f64 / secs / 1e6,
            utilization: d.busy.as_secs_f64() / secs,
        })
        .collect();
    let busiest = device.iter().map(|d| d.utilization).fold(0.0, f64::max);
    let busy_s = busy.as_secs_f64().max(1e-9);
    let contention = stats.log_contention.as_secs_f64() / busy_s;
    let work = stats.log_work.as_secs_f64() / busy_s;
    let mean = |h: &Histogram<u64>| if h.is_empty() { 0.0 } else { h.mean() };
    let quantile = |h: &Histogram<u64>, q| {
        if h.is_empty() {
            0.0
        } else {
            h.value_at_quantile(q) as f64
        }
    };
    Ok(Report {
        label: cfg.label(),
        workload: spec.clone(),
        buffers: cfg.engine.num_buffers,
        devices: cfg.devices,
        committed: stats.committed,
        aborts: stats.aborted,
        dropped,
        elapsed_s: secs,
        throughput: stats.committed as f64 / secs,
        steady_throughput: steady(&samples, stats.committed),
        latency_mean_us: mean(&latency),
        latency_p99_us: quantile(&latency, 0.99),
        latency_max_us: if latency.is_empty() {
            0.0
        } else {
            latency.max() as f64
        },
        e2e_mean_us: mean(&e2e),
        e2e_p99_us: quantile(&e2e, 0.99),
        stall_max_us: stall.as_secs_f64() * 1e6,
        device,
        breakdown: Breakdown {
            log_contention: contention,
            log_work: work,
            other: (1.0 - contention - work).max(0.0),
        },
        bound: if busiest >= 0.85 { "device" } else { "cpu" }.to_string(),
        checkpoint: checkpoint_report,
    })
}

/// Commit rate between the samples where 10% and 90% of `total` had
/// committed; the whole run when there are too few samples.
fn steady(samples: &[(Instant, u64)], total: u64) -> f64 {
    let first = samples.iter().find(|(_, n)| *n * 10 >= total);
    let last = samples.iter().find(|(_, n)| *n * 10 >= total * 9);
    match (first, last) {
        (Some(a), Some(b)) if b.0 > a.0 && b.1 > a.1 => {
            (b.1 - a.1) as f64 / (b.0 - a.0).as_secs_f64()
        }
        _ => {
            let (Some(a), Some(b)) = (samples.first(), samples.last()) else {
                return 0.0;
            };
            let secs = (b.0 - a.0).as_secs_f64();
            if secs > 0.0 {
                total as f64 / secs
            } else {
                0.0
            }
        }
    }
}

fn worker(
    engine: &Engine,
    spec: &WorkloadSpec,
    index: usize,
    share: u64,
    committed: &AtomicU64,
    precommitted: &AtomicU64,
) -> Result<WorkerResult, BenchError> {
    let started = Instant::now();
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let mut gen = TxnGen::new(spec);
    let mut w = engine.worker(index);
    let mut latency = histogram();
    let mut e2e = histogram();
    let mut dropped = 0;
    let note = |done: Vec<parlog::commit::Committed>,
                latency: &mut Histogram<u64>,
                e2e: &mut Histogram<u64>| {
        for c in &done {
            record(latency, c.committed_at - c.enqueued_at);
            record(e2e, c.committed_at - c.began_at);
        }
        committed.fetch_add(done.len() as u64, Ordering::Relaxed);
    };
    for n in 0..share {
        if let Some(rate) = spec.rate {
            // Open-loop arrivals; commits are picked up while waiting.
            let due = started + Duration::from_secs_f64(n as f64 / rate);
            loop {
                note(w.try_commit(), &mut latency, &mut e2e);
                let now = Instant::now();
                if now >= due {
                    break;
                }
                thread::sleep((due - now).min(COMMIT_POLL));
            }
        }
        let params = gen.params(&mut rng);
        let mut attempts = 0u64;
        loop {
            match gen.execute(&mut w, &params)? {
                Precommit::Queued => {
                    precommitted.fetch_add(1, Ordering::Relaxed);
                    break;
                }
                Precommit::Aborted => {
                    attempts += 1;
                    if spec.max_retries.is_some_and(|m| attempts > m) {
                        dropped += 1;
                        break;
                    }
                    // Back off harder the longer a transaction keeps losing.
                    if attempts < 4 {
                        thread::yield_now();
                    } else {
                        thread::sleep(Duration::from_micros(attempts.min(100) * 10));
                    }
                }
            }
        }
        note(w.try_commit(), &mut latency, &mut e2e);
    }
    note(w.drain()?, &mut latency, &mut e2e);
    Ok(WorkerResult {
        latency,
        e2e,
        stats: w.stats,
        busy: started.elapsed(),
        dropped,
    })
}
