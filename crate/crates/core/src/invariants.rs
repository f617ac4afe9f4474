//! Instrumented runtime assertions for the durability protocol.
//!
//! Each check bumps a process-wide counter when it trips and, in builds with
//! debug assertions, panics on the spot. Test suites read the counters to
//! prove that no check ever tripped.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    /// A segment reached the device while open or with a hole.
    FlushGate,
    /// A published CSN exceeded some buffer's DSN at computation time.
    CsnAboveMinDsn,
    /// A buffer's DSN moved backwards.
    DsnRegressed,
}

static FLUSH_GATE: AtomicU64 = AtomicU64::new(0);
static CSN_ABOVE_MIN_DSN: AtomicU64 = AtomicU64::new(0);
static DSN_REGRESSED: AtomicU64 = AtomicU64::new(0);

fn counter(check: Check) -> &'static AtomicU64 {
    match check {
        Check::FlushGate => &FLUSH_GATE,
        Check::CsnAboveMinDsn => &CSN_ABOVE_MIN_DSN,
        Check::DsnRegressed => &DSN_REGRESSED,
    }
}

#[inline]
pub fn check(ok: bool, which: Check, detail: impl FnOnce() -> String) {
    if !ok {
        counter(which).fetch_add(1, Ordering::Relaxed);
        debug_assert!(false, "invariant {:?} violated: {}", which, detail());
    }
}

pub fn trips(which: Check) -> u64 {
    counter(which).load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripCounts {
    pub flush_gate: u64,
    pub csn_above_min_dsn: u64,
    pub dsn_regressed: u64,
}

impl TripCounts {
    pub fn total(&self) -> u64 {
        self.flush_gate + self.csn_above_min_dsn + self.dsn_regressed
    }
}

pub fn snapshot() -> TripCounts {
    TripCounts {
        flush_gate: trips(Check::FlushGate),
        csn_above_min_dsn: trips(Check::CsnAboveMinDsn),
        dsn_regressed: trips(Check::DsnRegressed),
    }
}
