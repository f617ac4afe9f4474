//! Fuzzy parallel checkpoints.
//!
//! A checkpoint records the CSN at its start (the RSN), then `n` threads
//! each walk one key partition in order and write it into `m` files without
//! stopping writers. Tuples may carry values of transactions that are not
//! durable yet, so the checkpoint only becomes valid once the CSN exceeds
//! the largest tuple SSN any thread saw; from then on every value in it is
//! backed by durable log records.
//!
//! Data file layout (little-endian):
//!
//! ```text
//! "CKPT" | row_count u64 | rows: key u64, ssn u64, len u32, value | crc32
//! ```
//!
//! Metadata file layout:
//!
//! ```text
//! "CKPM" | epoch u64 | rsn u64 | status u8 (0 in progress, 1 valid)
//!        | threads u32 | files_per_thread u32
//!        | max_observed u64 × threads
//!        | file_count u32 | (name_len u16, name bytes) × file_count | crc32
//! ```

use std::ops::Range;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::device::Store;
use crate::engine::Engine;
use crate::txn::Table;
use crate::types::{Key, Ssn};

const DATA_MAGIC: &[u8; 4] = b"CKPT";
const META_MAGIC: &[u8; 4] = b"CKPM";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint file {file} is corrupt: {reason}")]
    Corrupt { file: String, reason: &'static str },
    #[error("engine halted during checkpoint")]
    Halted,
    #[error("checkpoint did not validate within {0:?}")]
    Timeout(Duration),
    #[error("checkpoint needs at least one thread and one file per thread")]
    BadFanout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointStatus {
    InProgress,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMetadata {
    pub epoch: u64,
    pub rsn: Ssn,
    pub status: CheckpointStatus,
    pub threads: usize,
    pub files_per_thread: usize,
    /// Largest tuple SSN each thread saw.
    pub max_observed: Vec<Ssn>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    NotYet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRow {
    pub key: Key,
    pub ssn: Ssn,
    pub value: Vec<u8>,
}

pub fn meta_file_name(epoch: u64) -> String {
    format!("ckpt-{epoch:06}.meta")
}

pub fn data_file_name(epoch: u64, thread: usize, file: usize) -> String {
    format!("ckpt-{epoch:06}-{thread}-{file}.dat")
}

fn parse_meta_epoch(name: &str) -> Option<u64> {
    name.strip_prefix("ckpt-")?
        .strip_suffix(".meta")?
        .parse()
        .ok()
}

/// Valid iff the CSN passed every tuple SSN the scan observed.
pub fn validate_checkpoint(max_observed: &[Ssn], current_csn: Ssn) -> Validity {
    let max = max_observed.iter().copied().max().unwrap_or(Ssn::ZERO);
    if current_csn > max {
        Validity::Valid
    } else {
        Validity::NotYet
    }
}

/// Splits `0..len` into `parts` contiguous ranges whose sizes differ by at
/// most one.
pub fn partition(len: u64, parts: usize) -> Vec<Range<Key>> {
    let parts = parts.max(1) as u64;
    let (q, r) = (len / parts, len % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let end = start + q + u64::from(i < r);
            let range = start..end;
            start = end;
            range
        })
        .collect()
}

pub fn encode_data(rows: &[CheckpointRow]) -> Vec<u8> {
    let size = 4 + 8 + rows.iter().map(|r| 20 + r.value.len()).sum::<usize>() + 4;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for row in rows {
        out.extend_from_slice(&row.key.to_le_bytes());
        out.extend_from_slice(&row.ssn.0.to_le_bytes());
        out.extend_from_slice(&(row.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&row.value);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }
}

/// Checks the trailer and returns the body.
fn checked_body<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8], &'static str> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err("bad magic");
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err("checksum mismatch");
    }
    Ok(&body[4..])
}

pub fn decode_data(bytes: &[u8]) -> Result<Vec<CheckpointRow>, &'static str> {
    let body = checked_body(bytes, DATA_MAGIC)?;
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let count = r.u64().ok_or("truncated")?;
    let mut rows = Vec::new();
    for _ in 0..count {
        let key = r.u64().ok_or("truncated")?;
        let ssn = Ssn(r.u64().ok_or("truncated")?);
        let len = r.u32().ok_or("truncated")? as usize;
        let value = r.take(len).ok_or("truncated")?.to_vec();
        rows.push(CheckpointRow { key, ssn, value });
    }
    if r.pos != body.len() {
        return Err("trailing bytes");
    }
    Ok(rows)
}

impl CheckpointMetadata {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(META_MAGIC);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rsn.0.to_le_bytes());
        out.push(match self.status {
            CheckpointStatus::InProgress => 0,
            CheckpointStatus::Valid => 1,
        });
        out.extend_from_slice(&(self.threads as u32).to_le_bytes());
        out.extend_from_slice(&(self.files_per_thread as u32).to_le_bytes());
        for s in &self.max_observed {
            out.extend_from_slice(&s.0.to_le_bytes());
        }
        out.extend_from_slice(&(self.files.len() as u32).to_le_bytes());
        for f in &self.files {
            out.extend_from_slice(&(f.len() as u16).to_le_bytes());
            out.extend_from_slice(f.as_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<CheckpointMetadata, &'static str> {
        let body = checked_body(bytes, META_MAGIC)?;
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        let epoch = r.u64().ok_or("truncated")?;
        let rsn = Ssn(r.u64().ok_or("truncated")?);
        let status = match r.take(1).ok_or("truncated")?[0] {
            0 => CheckpointStatus::InProgress,
            1 => CheckpointStatus::Valid,
            _ => return Err("bad status"),
        };
        let threads = r.u32().ok_or("truncated")? as usize;
        let files_per_thread = r.u32().ok_or("truncated")? as usize;
        let max_observed = (0..threads)
            .map(|_| r.u64().map(Ssn).ok_or("truncated"))
            .collect::<Result<Vec<_>, _>>()?;
        let count = r.u32().ok_or("truncated")? as usize;
        let mut files = Vec::new();
        for _ in 0..count {
            let len = r.u16().ok_or("truncated")? as usize;
            let name =
                std::str::from_utf8(r.take(len).ok_or("truncated")?).map_err(|_| "bad name")?;
            files.push(name.to_string());
        }
        if r.pos != body.len() {
            return Err("trailing bytes");
        }
        Ok(CheckpointMetadata {
            epoch,
            rsn,
            status,
            threads,
            files_per_thread,
            max_observed,
            files,
        })
    }

    pub fn max_observed(&self) -> Ssn {
        self.max_observed.iter().copied().max().unwrap_or(Ssn::ZERO)
    }
}

fn io_err(file: &str) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        file: file.to_string(),
        source,
    }
}

/// Every readable checkpoint metadata in the store, newest first.
/// Unreadable ones are reported separately.
pub fn list_metadata(
    store: &dyn Store,
) -> Result<(Vec<CheckpointMetadata>, Vec<String>), CheckpointError> {
    let mut epochs: Vec<(u64, String)> = store
        .list()
        .map_err(io_err("<list>"))?
        .into_iter()
        .filter_map(|n| parse_meta_epoch(&n).map(|e| (e, n)))
        .collect();
    epochs.sort_by_key(|e| std::cmp::Reverse(e.0));
    let mut metas = Vec::new();
    let mut corrupt = Vec::new();
    for (_, name) in epochs {
        match store
            .read(&name)
            .ok()
            .and_then(|b| CheckpointMetadata::decode(&b).ok())
        {
            Some(m) => metas.push(m),
            None => corrupt.push(name),
        }
    }
    Ok((metas, corrupt))
}

/// Newest valid checkpoint; corrupt or unfinished ones are skipped.
pub fn latest_valid(store: &dyn Store) -> Result<Option<CheckpointMetadata>, CheckpointError> {
    let (metas, _) = list_metadata(store)?;
    Ok(metas
        .into_iter()
        .find(|m| m.status == CheckpointStatus::Valid))
}

/// A checkpoint whose files are written but which may not be valid yet.
#[derive(Debug)]
pub struct CheckpointScan {
    meta: CheckpointMetadata,
}

impl CheckpointScan {
    pub fn metadata(&self) -> &CheckpointMetadata {
        &self.meta
    }

    pub fn max_observed(&self) -> Ssn {
        self.meta.max_observed()
    }

    /// Checks the CSN; once it passes, publishes the metadata as valid.
    pub fn try_finish(&mut self, engine: &Engine) -> Result<Validity, CheckpointError> {
        if self.meta.status == CheckpointStatus::Valid {
            return Ok(Validity::Valid);
        }
        let v = validate_checkpoint(&self.meta.max_observed, engine.csn());
        if v == Validity::Valid {
            self.meta.status = CheckpointStatus::Valid;
            let name = meta_file_name(self.meta.epoch);
            engine
                .store()
                .write_atomic(&name, &self.meta.encode())
                .map_err(io_err(&name))?;
        }
        Ok(v)
    }

    pub fn into_metadata(self) -> CheckpointMetadata {
        self.meta
    }
}

/// Records the RSN and scans the table into `threads × files_per_thread`
/// files.
pub fn begin_checkpoint(
    engine: &Engine,
    threads: usize,
    files_per_thread: usize,
) -> Result<CheckpointScan, CheckpointError> {
    if threads == 0 || files_per_thread == 0 {
        return Err(CheckpointError::BadFanout);
    }
    let store = engine.store();
    let (metas, corrupt) = list_metadata(store.as_ref())?;
    let epoch = metas
        .iter()
        .map(|m| m.epoch)
        .chain(corrupt.iter().filter_map(|n| parse_meta_epoch(n)))
        .max()
        .map_or(1, |e| e + 1);
    let rsn = engine.csn();
    let files: Vec<String> = (0..threads)
        .flat_map(|t| (0..files_per_thread).map(move |f| data_file_name(epoch, t, f)))
        .collect();
    let mut meta = CheckpointMetadata {
        epoch,
        rsn,
        status: CheckpointStatus::InProgress,
        threads,
        files_per_thread,
        max_observed: vec![Ssn::ZERO; threads],
        files,
    };
    let meta_name = meta_file_name(epoch);
    store
        .write_atomic(&meta_name, &meta.encode())
        .map_err(io_err(&meta_name))?;

    let table = engine.table();
    let parts = partition(table.len(), threads);
    let results: Vec<Result<Ssn, CheckpointError>> = thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(t, range)| {
                let store = store.clone();
                let range = range.clone();
                s.spawn(move || {
                    scan_partition(table, store.as_ref(), epoch, t, range, files_per_thread)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("checkpoint thread panicked"))
            .collect()
    });
    for (t, r) in results.into_iter().enumerate() {
        meta.max_observed[t] = r?;
    }
    store
        .write_atomic(&meta_name, &meta.encode())
        .map_err(io_err(&meta_name))?;
    Ok(CheckpointScan { meta })
}

fn scan_partition(
    table: &Table,
    store: &dyn Store,
    epoch: u64,
    thread: usize,
    range: Range<Key>,
    files: usize,
) -> Result<Ssn, CheckpointError> {
    let mut max = Ssn::ZERO;
    let sub = partition(range.end - range.start, files);
    for (f, r) in sub.into_iter().enumerate() {
        let mut rows = Vec::with_capacity((r.end - r.start) as usize);
        for key in (range.start + r.start)..(range.start + r.end) {
            let data = table.get(key).expect("key in table");
            max = max.max(data.ssn);
            rows.push(CheckpointRow {
                key,
                ssn: data.ssn,
                value: data.value,
            });
        }
        let name = data_file_name(epoch, thread, f);
        store
            .write_atomic(&name, &encode_data(&rows))
            .map_err(io_err(&name))?;
    }
    Ok(max)
}

/// Full checkpoint: scan, then wait until it validates.
pub fn run_checkpoint(
    engine: &Engine,
    threads: usize,
    files_per_thread: usize,
    timeout: Duration,
) -> Result<CheckpointMetadata, CheckpointError> {
    let mut scan = begin_checkpoint(engine, threads, files_per_thread)?;
    // Idle buffers are lifted past the scanned SSNs by their loggers.
    engine.request_ssn_floor(scan.max_observed().next());
    let started = Instant::now();
    loop {
        if scan.try_finish(engine)? == Validity::Valid {
            return Ok(scan.into_metadata());
        }
        if engine.is_halted() {
            return Err(CheckpointError::Halted);
        }
        if started.elapsed() > timeout {
            return Err(CheckpointError::Timeout(timeout));
        }
        thread::sleep(engine.config().flush_interval);
    }
}

/// Loads every file of `meta` into `table` using up to `threads` threads.
/// Returns the number of rows loaded and the largest SSN among them.
pub fn load_checkpoint(
    store: &dyn Store,
    meta: &CheckpointMetadata,
    table: &Table,
    threads: usize,
) -> Result<(u64, Ssn), CheckpointError> {
    let threads = threads.max(1);
    let results: Vec<Result<(u64, Ssn), CheckpointError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let mut rows = 0;
                    let mut max = Ssn::ZERO;
                    for name in meta.files.iter().skip(t).step_by(threads) {
                        let bytes = store.read(name).map_err(io_err(name))?;
                        let decoded =
                            decode_data(&bytes).map_err(|reason| CheckpointError::Corrupt {
                                file: name.clone(),
                                reason,
                            })?;
                        for row in decoded {
                            max = max.max(row.ssn);
                            table.install(row.key, row.ssn, row.value).map_err(|_| {
                                CheckpointError::Corrupt {
                                    file: name.clone(),
                                    reason: "key outside table",
                                }
                            })?;
                            rows += 1;
                        }
                    }
                    Ok((rows, max))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("load thread panicked"))
            .collect()
    });
    let mut total = (0, Ssn::ZERO);
    for r in results {
        let (rows, max) = r?;
        total.0 += rows;
        total.1 = total.1.max(max);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_validation_boundary() {
        assert_eq!(validate_checkpoint(&[Ssn(41)], Ssn(42)), Validity::Valid);
        assert_eq!(validate_checkpoint(&[Ssn(42)], Ssn(42)), Validity::NotYet);
        assert_eq!(
            validate_checkpoint(&[Ssn(3), Ssn(50)], Ssn(49)),
            Validity::NotYet
        );
    }

    #[test]
    fn partitions_cover_every_key_once() {
        for len in [0u64, 1, 7, 100] {
            for parts in 1..6 {
                let ranges = partition(len, parts);
                assert_eq!(ranges.len(), parts);
                let keys: Vec<u64> = ranges.iter().flat_map(|r| r.clone()).collect();
                assert_eq!(keys, (0..len).collect::<Vec<_>>());
                let sizes: Vec<u64> = ranges.iter().map(|r| r.end - r.start).collect();
                assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn data_round_trip_and_corruption() {
        let rows = vec![
            CheckpointRow {
                key: 1,
                ssn: Ssn(4),
                value: b"abc".to_vec(),
            },
            CheckpointRow {
                key: 2,
                ssn: Ssn(0),
                value: vec![],
            },
        ];
        let bytes = encode_data(&rows);
        assert_eq!(decode_data(&bytes).unwrap(), rows);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode_data(&bad).is_err(), "flip at {i} undetected");
        }
        assert!(decode_data(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let m = CheckpointMetadata {
            epoch: 3,
            rsn: Ssn(17),
            status: CheckpointStatus::Valid,
            threads: 2,
            files_per_thread: 2,
            max_observed: vec![Ssn(20), Ssn(19)],
            files: (0..2)
                .flat_map(|t| (0..2).map(move |f| data_file_name(3, t, f)))
                .collect(),
        };
        let bytes = m.encode();
        assert_eq!(CheckpointMetadata::decode(&bytes).unwrap(), m);
        assert_eq!(m.max_observed(), Ssn(20));
        assert_eq!(m.files[3], "ckpt-000003-1-1.dat");
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(CheckpointMetadata::decode(&bad).is_err());
    }
}
