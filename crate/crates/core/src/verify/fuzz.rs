//! Randomized and exhaustive crash campaigns over the deterministic
//! scheduler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{EngineError, FaultMode};
use crate::recovery::RecoveryError;
use crate::verify::sim::{self, Program, ProgramShape, SimConfig, SimCrash, SimOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoints {
    /// One crash per run at a uniformly chosen step, plus the clean run.
    Random,
    /// Every step and every record boundary (and one byte past it) on
    /// every device.
    All,
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub runs: u64,
    pub base_seed: u64,
    pub max_workers: usize,
    pub max_keys: u64,
    pub max_txns: usize,
    pub max_buffers: usize,
    pub fault: FaultMode,
    pub crash_points: CrashPoints,
    pub replay_threads: usize,
    /// Stop at the first failing run.
    pub stop_on_failure: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            runs: 100,
            base_seed: 0,
            max_workers: 8,
            max_keys: 64,
            max_txns: 200,
            max_buffers: 4,
            fault: FaultMode::None,
            crash_points: CrashPoints::Random,
            replay_threads: 2,
            stop_on_failure: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzFailure {
    pub run: u64,
    pub seed: u64,
    pub crash: SimCrash,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub runs: u64,
    /// Crash-and-recover checks performed (several per run with
    /// `CrashPoints::All`).
    pub checks: u64,
    pub failures: Vec<FuzzFailure>,
    /// Traces the recoverability check accepted.
    pub recoverable: u64,
    /// Traces where a stricter level passed but a weaker one failed.
    pub hierarchy_breaks: u64,
    /// Traces from runs with more than one buffer that were not sequential.
    pub multi_buffer_unsequential: u64,
    pub committed: u64,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Index of the first failing run.
    pub fn first_failure(&self) -> Option<u64> {
        self.failures.first().map(|f| f.run)
    }

    fn merge(&mut self, o: FuzzReport) {
        self.checks += o.checks;
        self.failures.extend(o.failures);
        self.recoverable += o.recoverable;
        self.hierarchy_breaks += o.hierarchy_breaks;
        self.multi_buffer_unsequential += o.multi_buffer_unsequential;
        self.committed += o.committed;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FuzzError {
    #[error("run {run}: {source}")]
    Engine {
        run: u64,
        #[source]
        source: EngineError,
    },
    #[error("run {run}: {source}")]
    Recovery {
        run: u64,
        #[source]
        source: RecoveryError,
    },
}

/// Seed of run `i`, spread so neighbouring runs share nothing.
fn run_seed(base: u64, i: u64) -> u64 {
    base.wrapping_add(i).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03
}

/// Random shape within the configured bounds.
pub fn random_setup(rng: &mut ChaCha8Rng, cfg: &FuzzConfig) -> (SimConfig, Program) {
    let buffers = rng.gen_range(1..=cfg.max_buffers.max(1));
    let workers = rng.gen_range(1..=cfg.max_workers.max(1));
    let keys = rng.gen_range(2..=cfg.max_keys.max(2));
    let txns = rng.gen_range(1..=cfg.max_txns.max(1));
    let mut sim_cfg = SimConfig::small(buffers, keys);
    sim_cfg.fault = cfg.fault;
    let program = sim::random_program(
        rng,
        ProgramShape {
            workers,
            txns,
            keys,
            value_len: sim_cfg.value_len,
        },
    );
    (sim_cfg, program)
}

/// Checks one finished or crashed run.
pub fn check_outcome(
    run: u64,
    seed: u64,
    crash: SimCrash,
    out: &SimOutcome,
    threads: usize,
) -> Result<FuzzReport, FuzzError> {
    let check = sim::recover_and_check(out, threads)
        .map_err(|source| FuzzError::Recovery { run, source })?;
    let mut report = FuzzReport {
        checks: 1,
        committed: out.committed.len() as u64,
        ..FuzzReport::default()
    };
    let levels = &check.levels;
    if levels.recoverable.is_pass() {
        report.recoverable += 1;
    }
    if !levels.hierarchy_holds() {
        report.hierarchy_breaks += 1;
    }
    if out.num_buffers > 1 && !levels.sequential.is_pass() {
        report.multi_buffer_unsequential += 1;
    }
    if !check.passed() {
        let detail = match (&check.oracle, &levels.recoverable) {
            (crate::verify::oracle::OracleVerdict::Violation(p), _) => {
                format!(
                    "oracle: {}",
                    p.iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join("; ")
                )
            }
            (_, crate::verify::levels::Verdict::Violation(v)) => format!("recoverability: {v}"),
            _ => "level hierarchy broken".to_string(),
        };
        report.failures.push(FuzzFailure {
            run,
            seed,
            crash,
            detail,
        });
    }
    Ok(report)
}

/// Every crash point of one program under one schedule.
pub fn exhaustive(
    cfg: &SimConfig,
    program: &Program,
    seed: u64,
    threads: usize,
    run: u64,
) -> Result<FuzzReport, FuzzError> {
    let engine_err = |source| FuzzError::Engine { run, source };
    let clean = sim::run(cfg, program, seed, SimCrash::None).map_err(engine_err)?;
    let mut report = check_outcome(run, seed, SimCrash::None, &clean, threads)?;
    let mut points: Vec<SimCrash> = (0..=clean.steps).map(SimCrash::AtStep).collect();
    for (device, ends) in clean.record_boundaries() {
        points.push(SimCrash::AfterBytes { device, bytes: 0 });
        for end in ends {
            points.push(SimCrash::AfterBytes { device, bytes: end });
            points.push(SimCrash::AfterBytes {
                device,
                bytes: end + 1,
            });
        }
    }
    for crash in points {
        let out = sim::run(cfg, program, seed, crash).map_err(engine_err)?;
        report.merge(check_outcome(run, seed, crash, &out, threads)?);
    }
    Ok(report)
}

/// Randomized campaign.
pub fn fuzz(cfg: &FuzzConfig) -> Result<FuzzReport, FuzzError> {
    let mut report = FuzzReport::default();
    for run in 0..cfg.runs {
        let seed = run_seed(cfg.base_seed, run);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sim_cfg, program) = random_setup(&mut rng, cfg);
        let one = match cfg.crash_points {
            CrashPoints::All => exhaustive(&sim_cfg, &program, seed, cfg.replay_threads, run)?,
            CrashPoints::Random => {
                let engine_err = |source| FuzzError::Engine { run, source };
                let clean =
                    sim::run(&sim_cfg, &program, seed, SimCrash::None).map_err(engine_err)?;
                let mut one = check_outcome(run, seed, SimCrash::None, &clean, cfg.replay_threads)?;
                let crash = SimCrash::AtStep(rng.gen_range(0..=clean.steps));
                let out = sim::run(&sim_cfg, &program, seed, crash).map_err(engine_err)?;
                one.merge(check_outcome(run, seed, crash, &out, cfg.replay_threads)?);
                one
            }
        };
        report.runs += 1;
        report.merge(one);
        if cfg.stop_on_failure && !report.passed() {
            break;
        }
    }
    Ok(report)
}
