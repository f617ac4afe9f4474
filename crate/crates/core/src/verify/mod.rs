//! Verification tooling: traces, dependency-level checks, the crash
//! consistency oracle and a deterministic scheduler.

pub mod fuzz;
pub mod levels;
pub mod oracle;
pub mod props;
pub mod scenarios;
pub mod sim;
pub mod stress;
pub mod trace;
