//! Restart from checkpoint plus log.
//!
//! The replay window starts at the RSN of the newest valid checkpoint and
//! ends at the smallest "last durable SSN" over all buffers: everything up
//! to that point is durable on every device, so the RAW predecessors of any
//! record inside the window are durable too. Write-only records have no RAW
//! predecessors and replay whenever they are durable and past the
//! checkpoint. Replay applies a logged write only over an older tuple SSN,
//! which makes the order of application irrelevant.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, CheckpointMetadata};
use crate::device::{parse_log_file_name, Store};
use crate::record::{scan_records, LogRecord, TornRecord};
use crate::txn::Table;
use crate::types::{Ssn, TxnId};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("log record for key {key} outside the table")]
    UnknownKey { key: u64 },
}

/// The intact part of one log file.
#[derive(Debug, Clone)]
pub struct LogFile {
    pub name: String,
    pub buffer: usize,
    pub seq: u64,
    pub valid_len: usize,
    pub records: usize,
    pub last_ssn: Option<Ssn>,
    pub torn: Option<TornRecord>,
}

#[derive(Debug, Clone)]
pub struct RecoveryPlan {
    /// Replay start (exclusive).
    pub rsns: Ssn,
    /// Replay end for records with reads (inclusive).
    pub rsne: Ssn,
    pub checkpoint: Option<CheckpointMetadata>,
    /// Per buffer, the files to replay in order. Files after a torn one are
    /// left out.
    pub logs: BTreeMap<usize, Vec<LogFile>>,
    /// Per buffer, the SSN of its last durable record (zero if none).
    pub last_durable: BTreeMap<usize, Ssn>,
}

impl RecoveryPlan {
    /// Whether a record takes part in replay.
    pub fn eligible(&self, ssn: Ssn, write_only: bool) -> bool {
        ssn > self.rsns && (ssn <= self.rsne || write_only)
    }

    pub fn files(&self) -> impl Iterator<Item = &LogFile> {
        self.logs.values().flatten()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub files: u64,
    pub records_scanned: u64,
    pub records_applied: u64,
    pub skipped_window: u64,
    pub entries_applied: u64,
    pub skipped_last_writer: u64,
    pub heartbeats: u64,
    pub torn_tails: u64,
}

impl ReplayStats {
    fn add(&mut self, o: &ReplayStats) {
        self.files += o.files;
        self.records_scanned += o.records_scanned;
        self.records_applied += o.records_applied;
        self.skipped_window += o.skipped_window;
        self.entries_applied += o.entries_applied;
        self.skipped_last_writer += o.skipped_last_writer;
        self.heartbeats += o.heartbeats;
        self.torn_tails += o.torn_tails;
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOutcome {
    pub stats: ReplayStats,
    /// Transactions whose records were inside the replay window.
    pub replayed: BTreeSet<TxnId>,
    /// Largest SSN of any durable record, replayed or not.
    pub max_ssn: Ssn,
}

fn read(store: &dyn Store, name: &str) -> Result<Vec<u8>, RecoveryError> {
    store.read(name).map_err(|source| RecoveryError::Io {
        file: name.to_string(),
        source,
    })
}

/// Picks the newest valid checkpoint and computes the replay window.
pub fn plan_recovery(store: &dyn Store) -> Result<RecoveryPlan, RecoveryError> {
    let checkpoint = checkpoint::latest_valid(store)?;
    let rsns = checkpoint.as_ref().map_or(Ssn::ZERO, |m| m.rsn);

    let mut names: BTreeMap<usize, Vec<(u64, String)>> = BTreeMap::new();
    for name in store.list().map_err(|source| RecoveryError::Io {
        file: "<list>".into(),
        source,
    })? {
        if let Some((buffer, seq)) = parse_log_file_name(&name) {
            names.entry(buffer).or_default().push((seq, name));
        }
    }

    let mut logs = BTreeMap::new();
    let mut last_durable = BTreeMap::new();
    for (buffer, mut files) in names {
        files.sort();
        let mut kept = Vec::new();
        let mut last = Ssn::ZERO;
        for (seq, name) in files {
            let scan = scan_records(&read(store, &name)?);
            let last_ssn = scan.records.last().map(|r| r.ssn);
            if let Some(s) = last_ssn {
                last = last.max(s);
            }
            let torn = scan.torn;
            kept.push(LogFile {
                name,
                buffer,
                seq,
                valid_len: scan.valid_len,
                records: scan.records.len(),
                last_ssn,
                torn,
            });
            if torn.is_some() {
                break;
            }
        }
        logs.insert(buffer, kept);
        last_durable.insert(buffer, last);
    }
    let rsne = last_durable.values().copied().min().unwrap_or(Ssn::ZERO);
    Ok(RecoveryPlan {
        rsns,
        rsne,
        checkpoint,
        logs,
        last_durable,
    })
}

/// Loads the plan's checkpoint (if any) into `table`.
pub fn recover_checkpoints(
    store: &dyn Store,
    plan: &RecoveryPlan,
    table: &Table,
    threads: usize,
) -> Result<(u64, Ssn), RecoveryError> {
    match &plan.checkpoint {
        Some(meta) => Ok(checkpoint::load_checkpoint(store, meta, table, threads)?),
        None => Ok((0, Ssn::ZERO)),
    }
}

fn replay_file(
    store: &dyn Store,
    plan: &RecoveryPlan,
    file: &LogFile,
    table: &Table,
    outcome: &mut ReplayOutcome,
) -> Result<(), RecoveryError> {
    let bytes = read(store, &file.name)?;
    let scan = scan_records(&bytes[..file.valid_len.min(bytes.len())]);
    let stats = &mut outcome.stats;
    stats.files += 1;
    if file.torn.is_some() {
        stats.torn_tails += 1;
    }
    for LogRecord {
        ssn,
        txn_id,
        write_only,
        entries,
    } in scan.records
    {
        stats.records_scanned += 1;
        outcome.max_ssn = outcome.max_ssn.max(ssn);
        if txn_id == TxnId::NONE && entries.is_empty() {
            stats.heartbeats += 1;
            continue;
        }
        if !plan.eligible(ssn, write_only) {
            stats.skipped_window += 1;
            continue;
        }
        stats.records_applied += 1;
        outcome.replayed.insert(txn_id);
        for e in entries {
            if table
                .apply_if_newer(e.key, ssn, &e.value)
                .map_err(|_| RecoveryError::UnknownKey { key: e.key })?
            {
                stats.entries_applied += 1;
            } else {
                stats.skipped_last_writer += 1;
            }
        }
    }
    Ok(())
}

/// Replays the plan's log files into `table`, files spread round-robin
/// over `threads` threads.
pub fn replay_logs(
    store: &dyn Store,
    plan: &RecoveryPlan,
    table: &Table,
    threads: usize,
) -> Result<ReplayOutcome, RecoveryError> {
    let threads = threads.max(1);
    let files: Vec<&LogFile> = plan.files().collect();
    let results: Vec<Result<ReplayOutcome, RecoveryError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let files = &files;
                s.spawn(move || {
                    let mut out = ReplayOutcome::default();
                    for file in files.iter().skip(t).step_by(threads) {
                        replay_file(store, plan, file, table, &mut out)?;
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replay thread panicked"))
            .collect()
    });
    let mut total = ReplayOutcome::default();
    for r in results {
        let r = r?;
        total.stats.add(&r.stats);
        total.replayed.extend(r.replayed);
        total.max_ssn = total.max_ssn.max(r.max_ssn);
    }
    Ok(total)
}

#[derive(Debug)]
pub struct Recovered {
    pub table: Table,
    pub plan: RecoveryPlan,
    pub checkpoint_rows: u64,
    pub replay: ReplayOutcome,
    /// New SSNs must exceed this.
    pub ssn_floor: Ssn,
}

/// Full restart: `initial` is the state before any logged transaction
/// (the loader's output).
pub fn recover(
    store: &dyn Store,
    initial: Table,
    threads: usize,
) -> Result<Recovered, RecoveryError> {
    let plan = plan_recovery(store)?;
    let (checkpoint_rows, ckpt_max) = recover_checkpoints(store, &plan, &initial, threads)?;
    let replay = replay_logs(store, &plan, &initial, threads)?;
    let ssn_floor = replay.max_ssn.max(ckpt_max).max(initial.max_ssn());
    Ok(Recovered {
        table: initial,
        plan,
        checkpoint_rows,
        replay,
        ssn_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{log_file_name, MemStore};
    use crate::record::LogEntry;

    fn rec(ssn: u64, txn: u64, write_only: bool, writes: &[(u64, &[u8])]) -> Vec<u8> {
        LogRecord {
            ssn: Ssn(ssn),
            txn_id: TxnId(txn),
            write_only,
            entries: writes
                .iter()
                .map(|(k, v)| LogEntry {
                    key: *k,
                    value: v.to_vec(),
                })
                .collect(),
        }
        .encode()
    }

    fn put_log(store: &MemStore, buffer: usize, records: &[Vec<u8>]) {
        let bytes: Vec<u8> = records.concat();
        store
            .write_atomic(&log_file_name(buffer, 0), &bytes)
            .unwrap();
    }

    #[test]
    fn empty_store_plans_nothing() {
        let store = MemStore::new();
        let plan = plan_recovery(&store).unwrap();
        assert_eq!((plan.rsns, plan.rsne), (Ssn::ZERO, Ssn::ZERO));
        let t = Table::from_values([b"a".to_vec()]);
        let r = recover(&store, t, 2).unwrap();
        assert_eq!(r.table.get(0).unwrap().value, b"a");
    }

    #[test]
    fn rsne_is_min_last_durable() {
        let store = MemStore::new();
        put_log(
            &store,
            0,
            &[rec(3, 1, true, &[(0, b"x")]), rec(9, 2, true, &[(1, b"y")])],
        );
        put_log(&store, 1, &[rec(7, 3, false, &[(2, b"z")])]);
        let plan = plan_recovery(&store).unwrap();
        assert_eq!(plan.rsns, Ssn::ZERO);
        assert_eq!(plan.rsne, Ssn(7));
    }

    #[test]
    fn empty_buffer_forces_zero_rsne() {
        let store = MemStore::new();
        put_log(
            &store,
            0,
            &[
                rec(3, 1, true, &[(0, b"x")]),
                rec(4, 2, false, &[(1, b"y")]),
            ],
        );
        put_log(&store, 1, &[]);
        let table = Table::from_values(vec![b"-".to_vec(); 2]);
        let r = recover(&store, table, 1).unwrap();
        assert_eq!(r.plan.rsne, Ssn::ZERO);
        assert_eq!(r.table.get(0).unwrap().value, b"x", "write-only replays");
        assert_eq!(r.table.get(1).unwrap().value, b"-", "has-reads skipped");
        assert_eq!(r.replay.stats.skipped_window, 1);
        assert_eq!(r.ssn_floor, Ssn(4));
    }

    #[test]
    fn last_writer_wins_regardless_of_order() {
        let store = MemStore::new();
        put_log(&store, 0, &[rec(3, 2, true, &[(0, b"three")])]);
        put_log(&store, 1, &[rec(2, 1, true, &[(0, b"two")])]);
        for threads in [1, 2, 8] {
            let r = recover(&store, Table::from_values([vec![]]), threads).unwrap();
            let d = r.table.get(0).unwrap();
            assert_eq!((d.ssn, d.value.as_slice()), (Ssn(3), &b"three"[..]));
        }
    }

    #[test]
    fn torn_tail_stops_replay() {
        let store = MemStore::new();
        let mut bytes = rec(1, 1, true, &[(0, b"a")]);
        let second = rec(2, 2, true, &[(0, b"b")]);
        bytes.extend_from_slice(&second[..second.len() - 3]);
        store.write_atomic(&log_file_name(0, 0), &bytes).unwrap();
        let r = recover(&store, Table::from_values([vec![]]), 1).unwrap();
        assert_eq!(r.table.get(0).unwrap().value, b"a");
        assert_eq!(r.replay.stats.torn_tails, 1);
        assert_eq!(r.plan.last_durable[&0], Ssn(1));
    }
}
