//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parlog::device::{DeviceModel, MemStore};
use parlog::invariants;
use parlog::recovery;
use parlog::txn::{Table, TupleData};
use parlog::verify::fuzz::{self, CrashPoints, FuzzConfig, FuzzReport};
use parlog::verify::props::{ssn_properties, SsnProperties};
use parlog::verify::scenarios;
use parlog::verify::sim::{self, ProgramShape, SimConfig, SimCrash, SimOutcome};
use parlog::verify::stress;
use parlog::verify::trace::TraceRecorder;
use parlog::{Engine, EngineOptions, FaultMode};
use parlog_bench::{run_benchmark, Report, RunConfig, WorkloadKind, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 1. Random crash points over random programs.
fn fuzz_campaign(report: &mut Option<FuzzReport>) -> Outcome {
    let r = fuzz::fuzz(&FuzzConfig {
        runs: 1000,
        base_seed: 0x5eed,
        max_workers: 8,
        max_keys: 64,
        max_txns: 200,
        crash_points: CrashPoints::Random,
        ..FuzzConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "{} runs, {} checks, {} failures, {} committed txns",
        r.runs,
        r.checks,
        r.failures.len(),
        r.committed
    );
    let ok = r.runs == 1000 && r.passed();
    let first = r.failures.first().map(|f| format!(" (first: {f:?})"));
    *report = Some(r);
    ensure(ok, detail + &first.unwrap_or_default())
}

/// 2. Crash at every boundary of the fixed ten-transaction script.
fn boundary_crashes(report: &mut FuzzReport) -> Outcome {
    let mut violations = 0;
    let mut checks = 0;
    for buffers in 1..=4 {
        let cfg = SimConfig::small(buffers, 4);
        let program = scenarios::boundary_program(cfg.value_len);
        if program.txn_count() != 10 {
            return Err(format!("script has {} transactions", program.txn_count()));
        }
        for seed in 0..8 {
            let r = fuzz::exhaustive(&cfg, &program, seed, 2, seed).map_err(|e| e.to_string())?;
            violations += r.failures.len();
            checks += r.checks;
            report.checks += r.checks;
            report.recoverable += r.recoverable;
            report.hierarchy_breaks += r.hierarchy_breaks;
            report.multi_buffer_unsequential += r.multi_buffer_unsequential;
        }
    }
    ensure(
        violations == 0 && checks > 0,
        format!("{checks} crash points over 1-4 buffers x 8 schedules, {violations} violations"),
    )
}

/// 3. Level checks over every trace captured by criteria 1 and 2.
fn level_checks(fuzzed: Option<&FuzzReport>, boundary: &FuzzReport) -> Outcome {
    let Some(f) = fuzzed else {
        return Err("fuzz campaign did not run".into());
    };
    let checks = f.checks + boundary.checks;
    let recoverable = f.recoverable + boundary.recoverable;
    let unsequential = f.multi_buffer_unsequential + boundary.multi_buffer_unsequential;
    let breaks = f.hierarchy_breaks + boundary.hierarchy_breaks;
    ensure(
        recoverable == checks && unsequential >= 1 && breaks == 0,
        format!(
            "recoverable {recoverable}/{checks}, {unsequential} multi-buffer traces not sequential, \
             {breaks} hierarchy breaks"
        ),
    )
}

fn simulated(
    seed: u64,
    buffers: usize,
    workers: usize,
    txns: usize,
    keys: u64,
) -> Result<SimOutcome, String> {
    let cfg = SimConfig::small(buffers, keys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let program = sim::random_program(
        &mut rng,
        ProgramShape {
            workers,
            txns,
            keys,
            value_len: cfg.value_len,
        },
    );
    sim::run(&cfg, &program, seed, SimCrash::None).map_err(|e| e.to_string())
}

/// 4. WAW, RAW and per-buffer monotonicity over 10^5 transactions.
fn ssn_invariants() -> Outcome {
    let mut total = SsnProperties::default();
    let mut seed = 0;
    while total.transactions < 100_000 {
        let out = simulated(seed, 1 + seed as usize % 4, 8, 200, 8 + seed % 56)?;
        total.add(&ssn_properties(&out.trace, &out.store, out.num_buffers));
        seed += 1;
    }

    let store = MemStore::new();
    let trace = Arc::new(TraceRecorder::new());
    let engine = Arc::new(
        Engine::open(
            stress::small_config(3),
            stress::key_table(32),
            Arc::new(store.clone()),
            EngineOptions {
                trace: Some(trace.clone()),
                ..EngineOptions::default()
            },
        )
        .map_err(|e| e.to_string())?,
    );
    engine.start_loggers();
    stress::run_load(
        &engine,
        stress::Load {
            workers: 6,
            txns_per_worker: 5000,
            keys: 32,
            seed: 4,
        },
    );
    engine.stop_loggers();
    total.add(&ssn_properties(&trace.snapshot(), &store, 3));

    ensure(
        total.clean() && total.transactions >= 130_000,
        format!(
            "{} txns ({seed} simulated runs + 30000 threaded): waw {}, raw {}, monotonic {}",
            total.transactions,
            total.waw_violations,
            total.raw_violations,
            total.monotonic_violations
        ),
    )
}

/// 5. Instrumented DSN/CSN assertions across everything run in this process.
fn invariant_trips() -> Outcome {
    let t = invariants::snapshot();
    ensure(
        t.total() == 0,
        format!(
            "flush gate {}, csn above min dsn {}, dsn regressed {}",
            t.flush_gate, t.csn_above_min_dsn, t.dsn_regressed
        ),
    )
}

fn table_bytes(rows: &[TupleData]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in rows {
        out.extend_from_slice(&t.ssn.0.to_le_bytes());
        out.extend_from_slice(&(t.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&t.value);
    }
    out
}

/// 6. One and eight replay threads over 100 crashed log sets.
fn replay_equivalence() -> Outcome {
    let mut identical = 0;
    let mut records = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let keys = rng.gen_range(4..48);
        let mut cfg = SimConfig::small(rng.gen_range(1..=4), keys);
        cfg.engine.log_file_rotate_bytes = 512;
        let shape = ProgramShape {
            workers: rng.gen_range(1..=8),
            txns: rng.gen_range(20..200),
            keys,
            value_len: cfg.value_len,
        };
        let program = sim::random_program(&mut rng, shape);
        let clean = sim::run(&cfg, &program, seed, SimCrash::None).map_err(|e| e.to_string())?;
        let crash = SimCrash::AtStep(rng.gen_range(clean.steps / 2..=clean.steps));
        let out = sim::run(&cfg, &program, seed, crash).map_err(|e| e.to_string())?;
        let initial = || Table::from_values(out.initial.iter().map(|t| t.value.clone()));
        let one = recovery::recover(&out.store, initial(), 1).map_err(|e| e.to_string())?;
        let eight = recovery::recover(&out.store, initial(), 8).map_err(|e| e.to_string())?;
        if table_bytes(&one.table.snapshot()) == table_bytes(&eight.table.snapshot()) {
            identical += 1;
        }
        records += one.replay.replayed.len();
    }
    ensure(
        identical == 100,
        format!("{identical}/100 log sets byte-identical, {records} records replayed"),
    )
}

fn ycsb_write(txns: u64, threads: usize) -> WorkloadSpec {
    WorkloadSpec {
        kind: WorkloadKind::YcsbWrite,
        records: 100_000,
        txns,
        threads,
        ..WorkloadSpec::default()
    }
}

/// Slow simulated devices so that a desk machine saturates them.
fn device_bound(mut cfg: RunConfig) -> RunConfig {
    cfg.model = DeviceModel {
        bandwidth: 16e6,
        ..DeviceModel::SSD
    };
    cfg.engine.buffer_capacity = 1 << 20;
    cfg
}

fn summary(r: &Report) -> String {
    format!("{} {:.0} txn/s ({})", r.label, r.steady_throughput, r.bound)
}

/// 7. Throughput with 1-device CENTR, 2 devices and 4 devices.
fn scalability() -> Outcome {
    let spec = ycsb_write(100_000, 8);
    let run = |cfg: RunConfig| run_benchmark(&device_bound(cfg)).map_err(|e| e.to_string());
    let centr = run(RunConfig::centralized(spec.clone()))?;
    let two = run(RunConfig::new(spec.clone(), 2))?;
    let four = run(RunConfig::new(spec, 4))?;
    let r2 = two.steady_throughput / centr.steady_throughput;
    let r4 = four.steady_throughput / two.steady_throughput;
    let detail = format!(
        "{}, {}, {}; 2 devices {r2:.2}x centr, 4 devices {r4:.2}x 2 devices",
        summary(&centr),
        summary(&two),
        summary(&four)
    );
    let first = centr.device_bound() && two.device_bound() && r2 >= 1.5;
    let second = r4 >= 1.3 || !four.device_bound();
    ensure(first && second, detail)
}

/// 8. One worker at low load with a 5 ms group-commit interval.
fn low_load_latency() -> Outcome {
    let mut spec = ycsb_write(2000, 1);
    spec.rate = Some(1000.0);
    let mut cfg = RunConfig::new(spec, 1);
    let interval = Duration::from_millis(5);
    cfg.engine.flush_interval = interval;
    let r = run_benchmark(&cfg).map_err(|e| e.to_string())?;
    // One flush is at most an I/O unit plus the record that closed it.
    let device = cfg
        .model
        .write_time(cfg.engine.io_unit_size + 2 * cfg.workload.value_len);
    let bound = 2 * interval + device;
    let mean = Duration::from_secs_f64(r.latency_mean_us / 1e6);
    let max = Duration::from_secs_f64(r.latency_max_us / 1e6);
    // Time the host did not run the process at all is not engine latency.
    let stall = Duration::from_secs_f64(r.stall_max_us / 1e6);
    let engine_max = max.saturating_sub(stall);
    ensure(
        r.committed == 2000
            && mean >= Duration::from_millis(2)
            && mean <= Duration::from_millis(10)
            && engine_max <= bound,
        format!(
            "{} txns, mean {:.2} ms, p99 {:.2} ms, max {:.2} ms, host stall {:.2} ms, \
             max less stall {:.2} ms (bound {:.2} ms)",
            r.committed,
            r.latency_mean_us / 1e3,
            r.latency_p99_us / 1e3,
            r.latency_max_us / 1e3,
            r.stall_max_us / 1e3,
            engine_max.as_secs_f64() * 1e3,
            bound.as_secs_f64() * 1e3
        ),
    )
}

/// 9. Fuzzy checkpoint under load, crash after it validates, recover.
fn checkpoint_crashes() -> Outcome {
    let mut passed = 0;
    let mut first_failure = None;
    for seed in 0..50 {
        match stress::checkpoint_crash_trial(stress::CheckpointTrial {
            keys: 64,
            workers: 4,
            txns: 10_000,
            seed,
        }) {
            Ok(r) if r.passed() => passed += 1,
            Ok(r) => {
                first_failure.get_or_insert(format!("seed {seed}: {:?}", r.oracle));
            }
            Err(e) => {
                first_failure.get_or_insert(format!("seed {seed}: {e}"));
            }
        }
    }
    let dirty = stress::dirty_release_check();
    let mut detail = format!(
        "{passed}/50 trials pass; dirty early-release tuple: {}",
        match &dirty {
            Ok(()) => "blocks validation until durable".to_string(),
            Err(e) => e.clone(),
        }
    );
    if let Some(f) = first_failure {
        detail += &format!(" (first failure {f})");
    }
    ensure(passed == 50 && dirty.is_ok(), detail)
}

/// 10. Both broken engine modes are caught within 1000 runs per campaign.
fn oracle_soundness() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, fault) in [
        ("skip durability wait", FaultMode::SkipDurabilityWait),
        ("skip waw tracking", FaultMode::SkipWawTracking),
    ] {
        let mut detected = 0;
        let mut worst = 0;
        let campaigns = 10;
        for c in 0..campaigns {
            let r = fuzz::fuzz(&FuzzConfig {
                runs: 1000,
                base_seed: 1000 * c,
                fault,
                stop_on_failure: true,
                ..FuzzConfig::default()
            })
            .map_err(|e| e.to_string())?;
            if let Some(run) = r.first_failure() {
                detected += 1;
                worst = worst.max(run + 1);
            }
        }
        ok &= detected == campaigns;
        parts.push(format!(
            "{name}: {detected}/{campaigns} campaigns, worst after {worst} runs"
        ));
    }
    ensure(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, started: Instant, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "[{tag}] AC{n} {name}: {detail} [{:.1}s]",
            started.elapsed().as_secs_f64()
        );
    };

    let mut fuzzed = None;
    let t = Instant::now();
    report(1, "crash-recovery fuzzing", t, fuzz_campaign(&mut fuzzed));
    let mut boundary = FuzzReport::default();
    let t = Instant::now();
    report(
        2,
        "exhaustive boundary crashes",
        t,
        boundary_crashes(&mut boundary),
    );
    let t = Instant::now();
    report(
        3,
        "definition-level checks",
        t,
        level_checks(fuzzed.as_ref(), &boundary),
    );
    let t = Instant::now();
    report(4, "SSN properties", t, ssn_invariants());
    let t = Instant::now();
    report(6, "parallel replay equivalence", t, replay_equivalence());
    let t = Instant::now();
    report(7, "scalability trend", t, scalability());
    let t = Instant::now();
    report(8, "commit latency", t, low_load_latency());
    let t = Instant::now();
    report(9, "checkpoint correctness", t, checkpoint_crashes());
    let t = Instant::now();
    report(10, "oracle soundness", t, oracle_soundness());
    // Last, so that it covers every run above.
    let t = Instant::now();
    report(5, "DSN/CSN invariants", t, invariant_trips());

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
