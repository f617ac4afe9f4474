//! Benchmark harness for the parlog engine: workload generators, the
//! database loader, a centralized-logging baseline and metrics reporting.

pub mod report;
pub mod runner;
pub mod workload;

pub use runner::{run_benchmark, BenchError, DeviceKind, Report, RunConfig};
pub use workload::{load_database, WorkloadKind, WorkloadSpec};
