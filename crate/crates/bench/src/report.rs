//! Human-readable tables and line-delimited JSON output.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::runner::Report;

pub fn print_table(reports: &[Report], out: &mut impl Write) -> io::Result<()> {
    writeln!(
        out,
        "{:<12} {:>8} {:>9} {:>11} {:>11} {:>10} {:>10} {:>10} {:>8} {:>20} {:>7}",
        "variant",
        "threads",
        "committed",
        "txn/s",
        "steady/s",
        "lat mean",
        "lat p99",
        "e2e mean",
        "MB/s",
        "contention/work/other",
        "bound"
    )?;
    for r in reports {
        let mb: f64 = r.device.iter().map(|d| d.mb_per_s).sum();
        writeln!(
            out,
            "{:<12} {:>8} {:>9} {:>11.0} {:>11.0} {:>8.0}us {:>8.0}us {:>8.0}us {:>8.1} {:>6.1}%/{:>4.1}%/{:>5.1}% {:>7}",
            r.label,
            r.workload.threads,
            r.committed,
            r.throughput,
            r.steady_throughput,
            r.latency_mean_us,
            r.latency_p99_us,
            r.e2e_mean_us,
            mb,
            r.breakdown.log_contention * 100.0,
            r.breakdown.log_work * 100.0,
            r.breakdown.other * 100.0,
            r.bound
        )?;
        if let Some(c) = &r.checkpoint {
            writeln!(
                out,
                "{:<12} checkpoint {} at rsn {} in {:.1} ms",
                "", c.epoch, c.rsn, c.millis
            )?;
        }
    }
    Ok(())
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
