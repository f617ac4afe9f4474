use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use parlog::device::{DeviceModel, DeviceOptions, DirStore};
use parlog::recovery;
use parlog::verify::fuzz::{self, CrashPoints, FuzzConfig};
use parlog::verify::scenarios;
use parlog::FaultMode;
use parlog_bench::report::{append_jsonl, print_table};
use parlog_bench::{
    load_database, run_benchmark, DeviceKind, RunConfig, WorkloadKind, WorkloadSpec,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "parlog",
    version,
    about = "Benchmark, checkpoint, recover and verify the parlog engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and report throughput, latency and device bandwidth.
    Bench(BenchArgs),
    /// Run a workload on real files and take one checkpoint part way.
    Checkpoint(CheckpointArgs),
    /// Restart from the checkpoints and logs in a directory.
    Recover(RecoverArgs),
    /// Run the crash-consistency checks.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, default_value = "ycsb-write")]
    workload: WorkloadKind,
    /// Table size for the YCSB workloads.
    #[arg(long, default_value_t = 100_000)]
    records: u64,
    /// Value size in bytes.
    #[arg(long, default_value_t = 1000)]
    value_len: usize,
    /// Warehouses for order-entry.
    #[arg(long, default_value_t = 20)]
    warehouses: u64,
}

impl WorkloadArgs {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            kind: self.workload,
            records: self.records,
            value_len: self.value_len,
            warehouses: self.warehouses,
            ..WorkloadSpec::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// Partially ordered logging over `--buffers` buffers.
    Parallel,
    /// One buffer, one atomic counter, total-order commit.
    Centr,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Devices {
    Sim,
    Real,
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 100_000)]
    txns: u64,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Log buffers, one device each (default 2; the centralized baseline
    /// always has one).
    #[arg(long)]
    buffers: Option<usize>,
    #[arg(long, value_enum, default_value = "parallel")]
    variant: Variant,
    /// Simulated devices pace writes with a bandwidth/latency model; real
    /// devices write and sync files under `--dir`. Defaults to
    /// PARLOG_DEVICE, else sim.
    #[arg(long, value_enum)]
    devices: Option<Devices>,
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Simulated bandwidth per device (defaults to PARLOG_BANDWIDTH, else
    /// 1200 MB/s).
    #[arg(long)]
    bandwidth_mbps: Option<f64>,
    /// Simulated per-write latency (defaults to PARLOG_LATENCY_US, else
    /// 21.5).
    #[arg(long)]
    latency_us: Option<f64>,
    #[arg(long, default_value_t = 10)]
    scan_len: u64,
    #[arg(long, default_value_t = 5.0)]
    flush_ms: f64,
    #[arg(long, default_value_t = 16_384)]
    io_unit: usize,
    /// Log buffer size in MiB.
    #[arg(long, default_value_t = 30)]
    buffer_mib: usize,
    /// Give up on a transaction after this many aborts (default: retry
    /// forever with backoff).
    #[arg(long)]
    retries: Option<u64>,
    /// Per-worker arrival rate in transactions per second (default:
    /// unthrottled).
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Runs to average.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Append one JSON line per run to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Fraction of the transactions after which the checkpoint starts.
    #[arg(long, default_value_t = 0.5)]
    at: f64,
    #[arg(long, default_value_t = 2)]
    checkpoint_threads: usize,
    #[arg(long, default_value_t = 2)]
    files_per_thread: usize,
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CrashPointArg {
    All,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    None,
    /// Acknowledge commits without waiting for durability.
    SkipDurabilityWait,
    /// Ignore overwritten versions when computing sequence numbers.
    SkipWawTracking,
}

#[derive(Args)]
struct VerifyArgs {
    /// Evaluate the eight hand-built two-buffer dependency scenarios.
    #[arg(long)]
    scenarios: bool,
    /// Run a randomized crash campaign.
    #[arg(long)]
    fuzz: bool,
    /// Runs in the campaign.
    #[arg(long, default_value_t = 1000)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Replay threads used by each recovery.
    #[arg(long, default_value_t = 2)]
    threads: usize,
    /// Largest key space of a run.
    #[arg(long, default_value_t = 64)]
    keys: u64,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 200)]
    txns: usize,
    #[arg(long, default_value_t = 4)]
    buffers: usize,
    #[arg(long, value_enum, default_value = "random")]
    crash_points: CrashPointArg,
    #[arg(long, value_enum, default_value = "none")]
    fault: FaultArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => bench(&a, None),
        Command::Checkpoint(a) => checkpoint(&a),
        Command::Recover(a) => recover(&a),
        Command::Verify(a) => verify(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn run_config(a: &BenchArgs) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let env = DeviceOptions::from_env()?;
    let mut spec = a.workload.spec();
    spec.txns = a.txns;
    spec.threads = a.threads;
    spec.scan_len = a.scan_len;
    spec.max_retries = a.retries;
    spec.rate = a.rate;
    spec.seed = a.seed;
    let mut cfg = match a.variant {
        Variant::Parallel => RunConfig::new(spec, a.buffers.unwrap_or(2)),
        Variant::Centr => match a.buffers {
            None | Some(1) => RunConfig::centralized(spec),
            Some(n) => {
                return Err(format!("the centralized baseline uses one device, not {n}").into())
            }
        },
    };
    cfg.devices = match a.devices {
        Some(Devices::Real) => DeviceKind::Real,
        Some(Devices::Sim) => DeviceKind::Sim,
        None if env.real => DeviceKind::Real,
        None => DeviceKind::Sim,
    };
    let mut model = env.model.unwrap_or(DeviceModel::SSD);
    if let Some(mbps) = a.bandwidth_mbps {
        model.bandwidth = mbps * 1e6;
    }
    if let Some(us) = a.latency_us {
        model.latency = Duration::from_secs_f64(us / 1e6);
    }
    cfg.model = model;
    cfg.dir = a.dir.clone();
    cfg.engine.flush_interval = Duration::from_secs_f64(a.flush_ms / 1e3);
    cfg.engine.io_unit_size = a.io_unit;
    cfg.engine.buffer_capacity = a.buffer_mib << 20;
    cfg.engine.validate()?;
    Ok(cfg)
}

fn bench(a: &BenchArgs, checkpoint_at: Option<f64>) -> CliResult {
    let mut cfg = run_config(a)?;
    cfg.checkpoint_at = checkpoint_at;
    let mut reports = Vec::new();
    for i in 0..a.repeat.max(1) {
        cfg.workload.seed = a.seed + i as u64;
        reports.push(run_benchmark(&cfg)?);
    }
    print_table(&reports, &mut io::stdout())?;
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let tps: f64 = reports.iter().map(|r| r.throughput).sum::<f64>() / n;
        let lat: f64 = reports.iter().map(|r| r.latency_mean_us).sum::<f64>() / n;
        println!(
            "average over {} runs: {tps:.0} txn/s, mean commit latency {lat:.0} us",
            reports.len()
        );
    }
    if let Some(out) = &a.out {
        append_jsonl(out, &reports)?;
    }
    Ok(true)
}

fn checkpoint(a: &CheckpointArgs) -> CliResult {
    let mut b = a.bench.clone();
    if b.dir.is_none() {
        return Err("checkpoint needs --dir".into());
    }
    b.devices.get_or_insert(Devices::Real);
    let mut cfg = run_config(&b)?;
    cfg.checkpoint_at = Some(a.at.clamp(0.0, 1.0));
    cfg.engine.checkpoint_threads = a.checkpoint_threads;
    cfg.engine.checkpoint_files_per_thread = a.files_per_thread;
    cfg.engine.validate()?;
    let report = run_benchmark(&cfg)?;
    print_table(std::slice::from_ref(&report), &mut io::stdout())?;
    if let Some(out) = &b.out {
        append_jsonl(out, &[report])?;
    }
    Ok(true)
}

#[derive(Serialize)]
struct RecoverReport {
    dir: String,
    threads: usize,
    checkpoint_epoch: Option<u64>,
    checkpoint_rows: u64,
    rsns: u64,
    rsne: u64,
    files: u64,
    records_scanned: u64,
    records_applied: u64,
    skipped_window: u64,
    skipped_last_writer: u64,
    heartbeats: u64,
    torn_tails: u64,
    load_ms: f64,
    recover_ms: f64,
}

fn recover(a: &RecoverArgs) -> CliResult {
    let store = DirStore::open(&a.dir)?;
    let started = Instant::now();
    let table = load_database(&a.workload.spec())?;
    let load_ms = started.elapsed().as_secs_f64() * 1e3;
    let started = Instant::now();
    let r = recovery::recover(&store, table, a.threads)?;
    let recover_ms = started.elapsed().as_secs_f64() * 1e3;
    let s = r.replay.stats;
    let report = RecoverReport {
        dir: a.dir.display().to_string(),
        threads: a.threads,
        checkpoint_epoch: r.plan.checkpoint.as_ref().map(|c| c.epoch),
        checkpoint_rows: r.checkpoint_rows,
        rsns: r.plan.rsns.get(),
        rsne: r.plan.rsne.get(),
        files: s.files,
        records_scanned: s.records_scanned,
        records_applied: s.records_applied,
        skipped_window: s.skipped_window,
        skipped_last_writer: s.skipped_last_writer,
        heartbeats: s.heartbeats,
        torn_tails: s.torn_tails,
        load_ms,
        recover_ms,
    };
    match report.checkpoint_epoch {
        Some(e) => println!(
            "checkpoint {e}: {} rows, rsn {}",
            report.checkpoint_rows, report.rsns
        ),
        None => println!("no valid checkpoint; replaying from the initial state"),
    }
    println!(
        "replay window ({}, {}]: {} files, {} records scanned, {} applied, {} outside the window, \
         {} entries superseded, {} heartbeats, {} torn tails",
        report.rsns,
        report.rsne,
        report.files,
        report.records_scanned,
        report.records_applied,
        report.skipped_window,
        report.skipped_last_writer,
        report.heartbeats,
        report.torn_tails
    );
    println!(
        "loaded in {load_ms:.1} ms, recovered in {recover_ms:.1} ms with {} threads",
        a.threads
    );
    if let Some(out) = &a.out {
        append_jsonl(out, &[report])?;
    }
    Ok(true)
}

fn verify(a: &VerifyArgs) -> CliResult {
    if !a.scenarios && !a.fuzz {
        return Err("choose --scenarios and/or --fuzz".into());
    }
    let mut ok = true;
    if a.scenarios {
        for s in scenarios::scenarios() {
            let r = scenarios::evaluate(&s)?;
            let verdict = if r.consistent() {
                "consistent"
            } else {
                "inconsistent"
            };
            let matches = r.consistent() == s.consistent;
            ok &= matches;
            println!(
                "({}) {:<13} {}{}",
                s.name,
                verdict,
                s.summary,
                if matches { "" } else { "  [UNEXPECTED]" }
            );
        }
    }
    if a.fuzz {
        let cfg = FuzzConfig {
            runs: a.seeds,
            base_seed: a.base_seed,
            max_workers: a.workers,
            max_keys: a.keys,
            max_txns: a.txns,
            max_buffers: a.buffers,
            fault: match a.fault {
                FaultArg::None => FaultMode::None,
                FaultArg::SkipDurabilityWait => FaultMode::SkipDurabilityWait,
                FaultArg::SkipWawTracking => FaultMode::SkipWawTracking,
            },
            crash_points: match a.crash_points {
                CrashPointArg::All => CrashPoints::All,
                CrashPointArg::Random => CrashPoints::Random,
            },
            replay_threads: a.threads,
            stop_on_failure: a.fault != FaultArg::None,
        };
        let started = Instant::now();
        let r = fuzz::fuzz(&cfg)?;
        println!(
            "{} runs, {} crash checks, {} failures, {} committed transactions, {:.1} s",
            r.runs,
            r.checks,
            r.failures.len(),
            r.committed,
            started.elapsed().as_secs_f64()
        );
        println!(
            "recoverable traces {}/{}, level hierarchy breaks {}, unsequential multi-buffer traces {}",
            r.recoverable, r.checks, r.hierarchy_breaks, r.multi_buffer_unsequential
        );
        for f in r.failures.iter().take(5) {
            println!(
                "run {} seed {:#x} crash {:?}: {}",
                f.run, f.seed, f.crash, f.detail
            );
        }
        if a.fault == FaultArg::None {
            ok &= r.passed();
        } else {
            match r.first_failure() {
                Some(run) => println!("fault detected at run {run}"),
                None => {
                    println!("fault NOT detected");
                    ok = false;
                }
            }
        }
    }
    Ok(ok)
}
